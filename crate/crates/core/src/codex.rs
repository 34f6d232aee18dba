//! Discrete codebook: nearest-entry quantisation, the two VQ loss terms, the
//! straight-through estimator and usage statistics.

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::diffcore::{Graph, ParamSet, Tensor, Var};
use crate::error::{Error, Result};
use crate::wave_encoder::EmbeddingSequence;

/// Name of the `[k, m]` codebook tensor inside a model's parameter set.
pub const CODEBOOK: &str = "codebook";

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub k: usize,
    pub m: usize,
    pub entries: Vec<f64>,
    pub usage: Vec<u64>,
}

impl Codebook {
    pub fn new(k: usize, m: usize, entries: Vec<f64>) -> Result<Self> {
        if k < 2 || m == 0 {
            return Err(Error::Config(format!(
                "codebook needs k >= 2 and m >= 1, got {k}x{m}"
            )));
        }
        if entries.len() != k * m {
            return Err(Error::shape(
                "codebook",
                format!("{} values for {k}x{m}", entries.len()),
            ));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("codebook entries must be finite".into()));
        }
        Ok(Self {
            k,
            m,
            entries,
            usage: vec![0; k],
        })
    }

    /// Entries uniform in `±1/sqrt(m)`.
    pub fn random<R: Rng>(k: usize, m: usize, rng: &mut R) -> Result<Self> {
        let t = Tensor::uniform(vec![k, m], 1.0 / (m as f64).sqrt(), rng);
        Self::new(k, m, t.data)
    }

    pub fn from_params(ps: &ParamSet) -> Result<Self> {
        let t = ps.by_name(CODEBOOK)?;
        match t.shape[..] {
            [k, m] => Self::new(k, m, t.data.clone()),
            ref s => Err(Error::shape(
                "codebook",
                format!("expected [k, m], got {s:?}"),
            )),
        }
    }

    pub fn entry(&self, i: usize) -> &[f64] {
        &self.entries[i * self.m..(i + 1) * self.m]
    }

    /// Index of the nearest entry by Euclidean distance, lowest index on ties.
    pub fn nearest(&self, z: &[f64]) -> usize {
        nearest(&self.entries, self.m, z)
    }

    /// Adds an index stream to the usage counters (masked `-1` ignored).
    pub fn record(&mut self, indices: &[i64]) {
        for &i in indices {
            if i >= 0 && (i as usize) < self.k {
                self.usage[i as usize] += 1;
            }
        }
    }
}

pub(crate) fn nearest(entries: &[f64], m: usize, z: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, c) in entries.chunks_exact(m).enumerate() {
        let d: f64 = c.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    best
}

pub fn init_codebook<R: Rng>(ps: &mut ParamSet, k: usize, m: usize, rng: &mut R) -> Result<()> {
    let cb = Codebook::random(k, m, rng)?;
    ps.insert(CODEBOOK, Tensor::new(vec![k, m], cb.entries)?)?;
    Ok(())
}

/// Nearest-entry indices and the quantised sequence; masked positions get
/// index `-1` and a zero row.
pub fn quantize(z_c: &EmbeddingSequence, cb: &Codebook) -> Result<(Vec<i64>, EmbeddingSequence)> {
    if z_c.dim != cb.m {
        return Err(Error::shape(
            "quantize",
            format!("embedding dim {} vs codebook dim {}", z_c.dim, cb.m),
        ));
    }
    let mut idx = Vec::with_capacity(z_c.len);
    let mut values = vec![0.0; z_c.len * z_c.dim];
    for i in 0..z_c.len {
        if z_c.mask[i] {
            let j = cb.nearest(z_c.row(i));
            idx.push(j as i64);
            values[i * cb.m..(i + 1) * cb.m].copy_from_slice(cb.entry(j));
        } else {
            idx.push(-1);
        }
    }
    Ok((
        idx,
        EmbeddingSequence::new(z_c.len, z_c.dim, values, z_c.mask.clone())?,
    ))
}

/// Quantises every row of `z_c` against the `codebook` parameter; the result
/// is a gather from the codebook, so gradients reach the selected entries.
pub fn quantize_graph(g: &mut Graph, z_c: Var) -> Result<(Vec<usize>, Var)> {
    let table = g.param(CODEBOOK)?;
    let m = g.shape(table)[1];
    if g.shape(z_c).get(1) != Some(&m) {
        return Err(Error::shape(
            "quantize",
            format!(
                "embedding {:?} vs codebook {:?}",
                g.shape(z_c),
                g.shape(table)
            ),
        ));
    }
    // the assignment is a discrete choice: taken from a detached copy so
    // gradient checks hold it fixed along with the other detached values
    let zs = g.stop_gradient(z_c)?;
    let entries = g.value(table);
    let idx: Vec<usize> = g
        .value(zs)
        .chunks_exact(m)
        .map(|row| nearest(entries, m, row))
        .collect();
    let z_q = g.embedding(table, &idx)?;
    Ok((idx, z_q))
}

fn mean_row_sq(g: &mut Graph, d: Var) -> Result<Var> {
    let rows = g.shape(d)[0].max(1);
    let sq = g.mul(d, d)?;
    let s = g.sum(sq)?;
    g.scale(s, 1.0 / rows as f64)
}

/// `(mean ‖sg(z_c) − z_q‖², β · mean ‖z_c − sg(z_q)‖²)` over rows.
pub fn vq_terms_graph(g: &mut Graph, z_c: Var, z_q: Var, beta: f64) -> Result<(Var, Var)> {
    if g.shape(z_c) != g.shape(z_q) {
        return Err(Error::shape(
            "vq_terms",
            format!("{:?} vs {:?}", g.shape(z_c), g.shape(z_q)),
        ));
    }
    let zc_sg = g.stop_gradient(z_c)?;
    let d = g.sub(zc_sg, z_q)?;
    let codebook = mean_row_sq(g, d)?;
    let zq_sg = g.stop_gradient(z_q)?;
    let d = g.sub(z_c, zq_sg)?;
    let commit = mean_row_sq(g, d)?;
    let commit = g.scale(commit, beta)?;
    Ok((codebook, commit))
}

/// Forward value `z_q`, gradient passed unchanged to `z_c`.
pub fn straight_through_graph(g: &mut Graph, z_c: Var, z_q: Var) -> Result<Var> {
    if g.shape(z_c) != g.shape(z_q) {
        return Err(Error::shape(
            "straight_through",
            format!("{:?} vs {:?}", g.shape(z_c), g.shape(z_q)),
        ));
    }
    g.straight_through(z_c, z_q)
}

/// VQ terms over the valid positions of two sequences.
pub fn vq_terms(z_c: &EmbeddingSequence, z_q: &EmbeddingSequence, beta: f64) -> Result<(f64, f64)> {
    if z_c.len != z_q.len || z_c.dim != z_q.dim || z_c.mask != z_q.mask {
        return Err(Error::shape(
            "vq_terms",
            format!("{}x{} vs {}x{}", z_c.len, z_c.dim, z_q.len, z_q.dim),
        ));
    }
    if beta <= 0.0 {
        return Err(Error::Config(format!("beta must be positive, got {beta}")));
    }
    let valid = z_c.valid_positions();
    if valid.is_empty() {
        return Ok((0.0, 0.0));
    }
    let sq: f64 = valid
        .iter()
        .map(|&i| {
            z_c.row(i)
                .iter()
                .zip(z_q.row(i))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        })
        .sum::<f64>()
        / valid.len() as f64;
    Ok((sq, beta * sq))
}

/// Element-wise forward value of the straight-through estimator.
pub fn straight_through(
    z_c: &EmbeddingSequence,
    z_q: &EmbeddingSequence,
) -> Result<EmbeddingSequence> {
    if z_c.len != z_q.len || z_c.dim != z_q.dim {
        return Err(Error::shape(
            "straight_through",
            format!("{}x{} vs {}x{}", z_c.len, z_c.dim, z_q.len, z_q.dim),
        ));
    }
    Ok(z_q.clone())
}

#[derive(Clone, Debug, PartialEq)]
pub struct CodebookStats {
    pub histogram: Vec<u64>,
    /// Fraction of entries used at least once.
    pub utilization: f64,
    /// `exp` of the entropy of the empirical index distribution.
    pub perplexity: f64,
}

pub fn codebook_stats(indices: &[i64], k: usize) -> Result<CodebookStats> {
    let mut histogram = vec![0u64; k];
    for &i in indices {
        if i < -1 || i >= k as i64 {
            return Err(Error::Range(format!("code index {i} outside [0, {k})")));
        }
        if i >= 0 {
            histogram[i as usize] += 1;
        }
    }
    let total: u64 = histogram.iter().sum();
    let used = histogram.iter().filter(|&&c| c > 0).count();
    let entropy = if total == 0 {
        0.0
    } else {
        histogram
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / total as f64;
                -p * p.ln()
            })
            .sum()
    };
    Ok(CodebookStats {
        histogram,
        utilization: used as f64 / k.max(1) as f64,
        perplexity: entropy.exp(),
    })
}

/// `u32 k`, `u32 m`, then the `k × m` entries as float32, all little-endian.
pub fn write_codebook_dump(path: &Path, cb: &Codebook) -> Result<()> {
    let mut out = Vec::with_capacity(8 + cb.entries.len() * 4);
    out.extend_from_slice(&(cb.k as u32).to_le_bytes());
    out.extend_from_slice(&(cb.m as u32).to_le_bytes());
    for &v in &cb.entries {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_codebook_dump(path: &Path) -> Result<Codebook> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 {
        return Err(Error::format(path, "missing codebook header"));
    }
    let k = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let m = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() - 8 != k * m * 4 {
        return Err(Error::format(
            path,
            format!("{k}x{m} codebook needs {} data bytes", k * m * 4),
        ));
    }
    let entries = bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Codebook::new(k, m, entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{grad_check, GradCheckOptions};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seq(rows: &[&[f64]]) -> EmbeddingSequence {
        let dim = rows[0].len();
        EmbeddingSequence::dense(rows.len(), dim, rows.concat()).unwrap()
    }

    #[test]
    fn nearest_and_ties() {
        let cb = Codebook::new(2, 2, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let (idx, zq) = quantize(&seq(&[&[0.9, 0.8], &[0.5, 0.5]]), &cb).unwrap();
        assert_eq!(idx, vec![1, 0]);
        assert_eq!(zq.values, vec![1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn masked_positions_get_minus_one() {
        let cb = Codebook::new(2, 2, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let z = EmbeddingSequence::new(2, 2, vec![1.0, 1.0, 3.0, 3.0], vec![true, false]).unwrap();
        let (idx, zq) = quantize(&z, &cb).unwrap();
        assert_eq!(idx, vec![1, -1]);
        assert_eq!(zq.values, vec![1.0, 1.0, 0.0, 0.0]);
        let wrong = seq(&[&[1.0, 2.0, 3.0]]);
        assert!(matches!(quantize(&wrong, &cb), Err(Error::Shape { .. })));
    }

    #[test]
    fn vq_terms_values() {
        let (a, b) = vq_terms(&seq(&[&[1.0, 1.0]]), &seq(&[&[0.0, 0.0]]), 0.2).unwrap();
        assert_eq!((a, b), (2.0, 0.4));
        let (a, b) = vq_terms(&seq(&[&[0.3, 0.1]]), &seq(&[&[0.3, 0.1]]), 0.2).unwrap();
        assert_eq!((a, b), (0.0, 0.0));
    }

    #[test]
    fn vq_gradients_are_separated() {
        let mut ps = ParamSet::new();
        ps.insert(
            "enc",
            Tensor::new(vec![2, 2], vec![0.3, -0.2, 0.9, 0.4]).unwrap(),
        )
        .unwrap();
        ps.insert(
            CODEBOOK,
            Tensor::new(vec![3, 2], vec![0.0, 0.0, 1.0, 0.5, -1.0, 1.0]).unwrap(),
        )
        .unwrap();
        let mut g = Graph::new(&ps);
        let zc = g.param("enc").unwrap();
        let (_, zq) = quantize_graph(&mut g, zc).unwrap();
        let (cbt, commit) = vq_terms_graph(&mut g, zc, zq, 0.25).unwrap();
        let grads = g.backward(cbt).unwrap();
        let enc = ps.id("enc").unwrap();
        let book = ps.id(CODEBOOK).unwrap();
        let find = |gr: &crate::diffcore::Gradients, id| {
            gr.params()
                .iter()
                .find(|(p, _)| *p == id)
                .map(|(_, v)| v.clone())
        };
        assert!(find(&grads, enc).map_or(true, |v| v.iter().all(|&x| x == 0.0)));
        assert!(find(&grads, book).unwrap().iter().any(|&x| x != 0.0));
        let grads = g.backward(commit).unwrap();
        assert!(find(&grads, book).map_or(true, |v| v.iter().all(|&x| x == 0.0)));
        assert!(find(&grads, enc).unwrap().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn straight_through_forward_and_backward() {
        let mut ps = ParamSet::new();
        ps.insert(
            "enc",
            Tensor::new(vec![2, 2], vec![0.3, -0.2, 0.9, 0.4]).unwrap(),
        )
        .unwrap();
        ps.insert(
            CODEBOOK,
            Tensor::new(vec![2, 2], vec![0.0, 0.0, 1.0, 0.5]).unwrap(),
        )
        .unwrap();
        let mut g = Graph::new(&ps);
        let zc = g.param("enc").unwrap();
        let (_, zq) = quantize_graph(&mut g, zc).unwrap();
        let st = straight_through_graph(&mut g, zc, zq).unwrap();
        assert_eq!(g.value(st), g.value(zq));
        let s = g.sum(st).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(zc).unwrap(), &[1.0; 4]);

        // quantised target treated as a constant: the check runs on the encoder side only
        let zq_const = vec![0.0, 0.0, 1.0, 0.5];
        let report = grad_check(
            &mut ps,
            |n| n == "enc",
            |g| {
                let zc = g.param("enc")?;
                let zq = g.input(vec![2, 2], zq_const.clone())?;
                let st = straight_through_graph(g, zc, zq)?;
                let w = g.input(vec![2, 2], vec![1.0, -2.0, 0.5, 3.0])?;
                let y = g.mul(st, w)?;
                let y = g.mul(y, zc)?;
                g.sum(y)
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4);
    }

    #[test]
    fn stats() {
        let s = codebook_stats(&[0, 0, 0, -1], 4).unwrap();
        assert_eq!(s.utilization, 0.25);
        assert!((s.perplexity - 1.0).abs() < 1e-12);
        let s = codebook_stats(&[0, 1, 2, 3, 3, 2, 1, 0], 4).unwrap();
        assert!((s.perplexity - 4.0).abs() < 1e-12);
        let s = codebook_stats(&[0, 0, 1, 2], 4).unwrap();
        let h: f64 = -(0.5f64 * 0.5f64.ln() + 2.0 * 0.25 * 0.25f64.ln());
        assert_eq!(s.histogram, vec![2, 1, 1, 0]);
        assert!((s.perplexity - h.exp()).abs() < 1e-12);
        assert_eq!(s.utilization, 0.75);
        assert!(matches!(codebook_stats(&[4], 4), Err(Error::Range(_))));
    }

    #[test]
    fn dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cb.bin");
        let cb = Codebook::new(3, 2, vec![0.5, -1.0, 2.0, 0.25, 0.0, 8.0]).unwrap();
        write_codebook_dump(&p, &cb).unwrap();
        let back = read_codebook_dump(&p).unwrap();
        assert_eq!(back.entries, cb.entries);
        assert_eq!(fs::read(&p).unwrap().len(), 8 + 6 * 4);
    }

    fn brute_force(entries: &[f64], m: usize, z: &[f64]) -> usize {
        let d: Vec<f64> = entries
            .chunks(m)
            .map(|c| c.iter().zip(z).map(|(a, b)| (a - b).powi(2)).sum())
            .collect();
        let min = d.iter().cloned().fold(f64::INFINITY, f64::min);
        d.iter().position(|&x| x == min).unwrap()
    }

    proptest! {
        #[test]
        fn quantize_matches_brute_force(k in 2usize..=16, m in 1usize..=8, seed in any::<u64>(), dup in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut cb = Codebook::random(k, m, &mut rng).unwrap();
            if dup {
                // force an exact tie between two entries
                let first = cb.entry(0).to_vec();
                cb.entries[(k - 1) * m..].copy_from_slice(&first);
            }
            let z: Vec<f64> = (0..3 * m).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (idx, _) = quantize(&EmbeddingSequence::dense(3, m, z.clone()).unwrap(), &cb).unwrap();
            for r in 0..3 {
                prop_assert_eq!(idx[r] as usize, brute_force(&cb.entries, m, &z[r * m..(r + 1) * m]));
            }
        }

        #[test]
        fn argmin_invariant_under_common_shift(seed in any::<u64>(), shift in -5.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cb = Codebook::random(8, 4, &mut rng).unwrap();
            let z: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let moved = Codebook::new(8, 4, cb.entries.iter().map(|v| v + shift).collect()).unwrap();
            let zs: Vec<f64> = z.iter().map(|v| v + shift).collect();
            let a = cb.nearest(&z);
            let b = moved.nearest(&zs);
            // exact ties can break differently after rounding; distances must agree
            let da: f64 = cb.entry(a).iter().zip(&z).map(|(x, y)| (x - y).powi(2)).sum();
            let db: f64 = cb.entry(b).iter().zip(&z).map(|(x, y)| (x - y).powi(2)).sum();
            prop_assert!(a == b || (da - db).abs() < 1e-9);
        }

        #[test]
        fn vq_terms_non_negative(seed in any::<u64>(), beta in 0.01f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cb = Codebook::random(4, 3, &mut rng).unwrap();
            let z: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let zc = EmbeddingSequence::dense(2, 3, z).unwrap();
            let (_, zq) = quantize(&zc, &cb).unwrap();
            let (a, b) = vq_terms(&zc, &zq, beta).unwrap();
            prop_assert!(a >= 0.0 && b >= 0.0);
        }
    }
}
