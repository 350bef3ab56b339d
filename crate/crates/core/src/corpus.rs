//! Synthetic byte-stream generators standing in for text corpora, plus
//! helpers for slicing a stream into fixed-length windows.

use std::str::FromStr;

use crate::linalg::Rng;

/// Byte stream generators. All emit bytes in `0..alphabet`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Generator {
    /// Independent uniform bytes.
    Uniform { alphabet: usize },
    /// Sparse random bigram chain: each symbol has `branching` successors with random weights.
    Markov { alphabet: usize, branching: usize },
    /// Independent Zipf-distributed bytes over a random symbol permutation.
    Zipf { alphabet: usize, exponent: f64 },
}

impl Generator {
    pub fn name(&self) -> &'static str {
        match self {
            Generator::Uniform { .. } => "uniform",
            Generator::Markov { .. } => "markov",
            Generator::Zipf { .. } => "zipf",
        }
    }

    pub fn generate(&self, n: usize, seed: u64) -> Vec<u8> {
        let mut rng = Rng::seeded(seed);
        match *self {
            Generator::Uniform { alphabet } => {
                let a = alphabet.clamp(1, 256);
                (0..n).map(|_| rng.below(a) as u8).collect()
            }
            Generator::Markov { alphabet, branching } => {
                let a = alphabet.clamp(1, 256);
                let b = branching.clamp(1, a);
                let table: Vec<Vec<(usize, f64)>> = (0..a)
                    .map(|_| {
                        let mut succ: Vec<(usize, f64)> = (0..b)
                            .map(|_| (rng.below(a), rng.uniform() + 0.05))
                            .collect();
                        let total: f64 = succ.iter().map(|s| s.1).sum();
                        succ.iter_mut().for_each(|s| s.1 /= total);
                        succ
                    })
                    .collect();
                let mut state = rng.below(a);
                let mut out = Vec::with_capacity(n);
                for _ in 0..n {
                    out.push(state as u8);
                    let u = rng.uniform();
                    let mut acc = 0.0;
                    let succ = &table[state];
                    state = succ[succ.len() - 1].0;
                    for &(next, p) in succ {
                        acc += p;
                        if u < acc {
                            state = next;
                            break;
                        }
                    }
                }
                out
            }
            Generator::Zipf { alphabet, exponent } => {
                let a = alphabet.clamp(1, 256);
                let mut perm: Vec<usize> = (0..a).collect();
                for i in (1..a).rev() {
                    perm.swap(i, rng.below(i + 1));
                }
                let weights: Vec<f64> = (1..=a).map(|r| (r as f64).powf(-exponent)).collect();
                let total: f64 = weights.iter().sum();
                let cdf: Vec<f64> = weights
                    .iter()
                    .scan(0.0, |acc, w| {
                        *acc += w / total;
                        Some(*acc)
                    })
                    .collect();
                (0..n)
                    .map(|_| {
                        let u = rng.uniform();
                        let rank = cdf.partition_point(|&c| c <= u).min(a - 1);
                        perm[rank] as u8
                    })
                    .collect()
            }
        }
    }
}

impl FromStr for Generator {
    type Err = String;

    /// `uniform[:A]`, `markov[:A[:B]]`, `zipf[:A[:S]]`.
    fn from_str(s: &str) -> Result<Self, String> {
        let mut parts = s.split(':');
        let kind = parts.next().unwrap_or_default();
        let arg = |p: Option<&str>, default: f64| -> Result<f64, String> {
            p.map_or(Ok(default), |v| {
                v.parse::<f64>().map_err(|_| format!("bad generator parameter {v:?} in {s:?}"))
            })
        };
        let a = parts.next();
        let b = parts.next();
        if parts.next().is_some() {
            return Err(format!("too many generator parameters in {s:?}"));
        }
        let g = match kind {
            "uniform" => Generator::Uniform {
                alphabet: arg(a, 256.0)? as usize,
            },
            "markov" => Generator::Markov {
                alphabet: arg(a, 96.0)? as usize,
                branching: arg(b, 6.0)? as usize,
            },
            "zipf" => Generator::Zipf {
                alphabet: arg(a, 96.0)? as usize,
                exponent: arg(b, 1.1)?,
            },
            other => return Err(format!("unknown generator {other:?}")),
        };
        Ok(g)
    }
}

/// `count` consecutive windows of `len` tokens starting at `offset`.
/// Returns `None` when the stream is too short.
pub fn windows(stream: &[u8], offset: usize, count: usize, len: usize) -> Option<Vec<Vec<u32>>> {
    let end = offset.checked_add(count.checked_mul(len)?)?;
    if end > stream.len() {
        return None;
    }
    Some(
        (0..count)
            .map(|i| {
                let start = offset + i * len;
                stream[start..start + len].iter().map(|&b| b as u32).collect()
            })
            .collect(),
    )
}
