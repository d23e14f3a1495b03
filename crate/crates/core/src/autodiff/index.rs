use std::cell::{OnceCell, RefCell};
use std::collections::HashMap;
use std::ops::Deref;
use std::rc::Rc;

/// Flat gather indices for `Tensor::take` / `Tensor::scatter_add`.
/// Negative entries read as zero.
#[derive(Clone, Debug)]
pub struct IndexMap(Rc<Inner>);

#[derive(Debug)]
struct Inner {
    idx: Vec<i64>,
    runs: OnceCell<Vec<Run>>,
}

/// `len` consecutive outputs starting at `out` read consecutive sources from
/// `src` (or zeros when `src` is negative).
#[derive(Clone, Copy, Debug)]
pub(crate) struct Run {
    pub out: usize,
    pub src: i64,
    pub len: usize,
}

impl Deref for IndexMap {
    type Target = [i64];
    fn deref(&self) -> &[i64] {
        &self.0.idx
    }
}

#[derive(Clone, PartialEq, Eq, Hash)]
enum Key {
    Im2col([usize; 7]),
    Upsample([usize; 4]),
}

thread_local! {
    static CACHE: RefCell<HashMap<Key, IndexMap>> = RefCell::new(HashMap::new());
}

fn cached(key: Key, build: impl FnOnce() -> Vec<i64>) -> IndexMap {
    if let Some(hit) = CACHE.with(|c| c.borrow().get(&key).cloned()) {
        return hit;
    }
    let idx = IndexMap::new(build());
    CACHE.with(|c| {
        let mut c = c.borrow_mut();
        // bounded: shapes used by one process are few
        if c.len() > 256 {
            c.clear();
        }
        c.insert(key, idx.clone());
    });
    idx
}

impl IndexMap {
    pub fn new(idx: Vec<i64>) -> Self {
        IndexMap(Rc::new(Inner {
            idx,
            runs: OnceCell::new(),
        }))
    }

    /// Contiguous stretches of the index, computed once.
    pub(crate) fn runs(&self) -> &[Run] {
        self.0.runs.get_or_init(|| {
            let idx = &self.0.idx;
            let mut runs: Vec<Run> = Vec::new();
            for (k, &i) in idx.iter().enumerate() {
                if let Some(r) = runs.last_mut() {
                    let next = if r.src < 0 { i < 0 } else { i == r.src + r.len as i64 };
                    if next {
                        r.len += 1;
                        continue;
                    }
                }
                runs.push(Run { out: k, src: i.max(-1), len: 1 });
            }
            runs
        })
    }

    /// Whether run-wise copying beats element-wise indexing.
    pub(crate) fn prefers_runs(&self) -> bool {
        self.runs().len() * 4 <= self.0.idx.len()
    }

    /// Indices selecting `[start, start+len)` along `axis` of a row-major tensor.
    pub fn narrow(shape: &[usize], axis: usize, start: usize, len: usize) -> Self {
        assert!(start + len <= shape[axis], "narrow out of range");
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut idx = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            for a in start..start + len {
                let base = (o * shape[axis] + a) * inner;
                idx.extend((base..base + inner).map(|i| i as i64));
            }
        }
        IndexMap::new(idx)
    }

    /// Patch extraction for an NHWC tensor `[b, h, w, c]`: rows are output
    /// pixels `(b, oy, ox)`, columns are `(ky, kx, c)`. Out-of-bounds taps
    /// read zero.
    pub fn im2col(b: usize, h: usize, w: usize, c: usize, k: usize, stride: usize, pad: usize) -> Self {
        cached(Key::Im2col([b, h, w, c, k, stride, pad]), || {
            let (ho, wo) = conv_out(h, w, k, stride, pad);
            let mut idx = Vec::with_capacity(b * ho * wo * k * k * c);
            for bi in 0..b {
                for oy in 0..ho {
                    for ox in 0..wo {
                        for ky in 0..k {
                            for kx in 0..k {
                                let y = (oy * stride + ky) as isize - pad as isize;
                                let x = (ox * stride + kx) as isize - pad as isize;
                                let inside = y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w;
                                for ci in 0..c {
                                    if inside {
                                        let flat = ((bi * h + y as usize) * w + x as usize) * c + ci;
                                        idx.push(flat as i64);
                                    } else {
                                        idx.push(-1);
                                    }
                                }
                            }
                        }
                    }
                }
            }
            idx
        })
    }

    /// Nearest-neighbour 2x upsampling of an NHWC tensor.
    pub fn upsample2x(b: usize, h: usize, w: usize, c: usize) -> Self {
        cached(Key::Upsample([b, h, w, c]), || {
            let mut idx = Vec::with_capacity(b * 4 * h * w * c);
            for bi in 0..b {
                for y in 0..2 * h {
                    for x in 0..2 * w {
                        let base = ((bi * h + y / 2) * w + x / 2) * c;
                        idx.extend((base..base + c).map(|i| i as i64));
                    }
                }
            }
            idx
        })
    }
}

pub(crate) fn conv_out(h: usize, w: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    ((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1)
}
