//! Retrieval evaluation across model widths.
//!
//! Features from any two slices of one checkpoint (or from two different
//! checkpoints) are compared by cosine similarity: queries embedded by one
//! model, gallery by another, ranked per query. The full grid over crop
//! ratios is the compatibility matrix; the diagonal is ordinary
//! self-retrieval. Rows are L2-normalized at extraction so dot product is
//! cosine and scale differences between models cancel; the flag is recorded
//! in the matrix metadata.

use crate::data::{LabeledVectorSet, Split};
use crate::model::{ModelError, SwitchableModel};
use crate::tensor::{Tape, Tensor, TensorError};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no {0:?} samples to embed")]
    EmptySplit(Split),
    #[error("query dim {query} does not match gallery dim {gallery}")]
    DimMismatch { query: usize, gallery: usize },
    #[error("{what}: {rows} rows for {labels} labels")]
    LabelCount {
        what: &'static str,
        rows: usize,
        labels: usize,
    },
    #[error("{what}: expected a matrix, got shape {shape:?}")]
    NotAMatrix { what: &'static str, shape: Vec<usize> },
    #[error("{what}: non-finite feature in row {row}")]
    NonFiniteFeature { what: &'static str, row: usize },
    #[error("no query has a relevant gallery item")]
    NoValidQueries,
    #[error("empty ratio list")]
    NoRatios,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub map: f64,
    pub r1: f64,
    /// Queries that had at least one relevant gallery item.
    pub queries: usize,
    /// Queries skipped for lack of any relevant gallery item.
    pub skipped: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompatEntry {
    pub q: f64,
    pub g: f64,
    pub map: f64,
    pub r1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompatMetadata {
    pub checkpoint: String,
    pub dataset: String,
    pub queries: usize,
    pub skipped_queries: usize,
    pub l2_normalized: bool,
}

/// Full (query ratio × gallery ratio) metric grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompatMatrix {
    pub ratios: Vec<f64>,
    pub metric: String,
    pub entries: Vec<CompatEntry>,
    pub metadata: CompatMetadata,
}

impl CompatMatrix {
    pub fn get(&self, q: f64, g: f64) -> Option<&CompatEntry> {
        self.entries.iter().find(|e| e.q == q && e.g == g)
    }

    /// Aligned text grid, query ratios down, gallery ratios across,
    /// cells as mAP/R1.
    pub fn render_table(&self) -> String {
        let mut out = String::from("  q\\g ");
        for g in &self.ratios {
            out.push_str(&format!("  {:>11}", format!("{g:.2}")));
        }
        out.push('\n');
        for &q in &self.ratios {
            out.push_str(&format!(" {q:>5.2}"));
            for &g in &self.ratios {
                match self.get(q, g) {
                    Some(e) => out.push_str(&format!("  {:.3}/{:.3}", e.map, e.r1)),
                    None => out.push_str(&format!("  {:>11}", "-")),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Embeds one split with the given slice in eval mode and L2-normalizes
/// the rows.
pub fn extract_features(
    model: &SwitchableModel,
    ratio: f64,
    set: &LabeledVectorSet,
    split: Split,
) -> Result<(Tensor, Vec<usize>), EvalError> {
    let rows = set.rows_of(split);
    if rows.is_empty() {
        return Err(EvalError::EmptySplit(split));
    }
    let (x, labels) = set.batch(&rows);
    let mut tape = Tape::new();
    let f = model.forward_eval(&mut tape, ratio, &x)?;
    let normed = tape.l2_normalize_rows(f)?;
    Ok((tape.value(normed).clone(), labels))
}

struct QueryStat {
    ap: f64,
    top1: bool,
    valid: bool,
}

/// Ranks the gallery per query by descending cosine similarity (ties broken
/// by gallery index) and averages precision at the relevant positions.
pub fn map_r1(
    query: &Tensor,
    query_labels: &[usize],
    gallery: &Tensor,
    gallery_labels: &[usize],
) -> Result<RetrievalMetrics, EvalError> {
    let (nq, dq) = check_matrix("query", query, query_labels)?;
    let (ng, dg) = check_matrix("gallery", gallery, gallery_labels)?;
    if dq != dg {
        return Err(EvalError::DimMismatch { query: dq, gallery: dg });
    }
    let stats = per_query_stats(query.data(), query_labels, gallery.data(), gallery_labels, dq, nq, ng);
    let valid = stats.iter().filter(|s| s.valid).count();
    if valid == 0 {
        return Err(EvalError::NoValidQueries);
    }
    let map = stats.iter().filter(|s| s.valid).map(|s| s.ap).sum::<f64>() / valid as f64;
    let hits = stats.iter().filter(|s| s.valid && s.top1).count();
    Ok(RetrievalMetrics {
        map,
        r1: hits as f64 / valid as f64,
        queries: valid,
        skipped: nq - valid,
    })
}

fn check_matrix(
    what: &'static str,
    t: &Tensor,
    labels: &[usize],
) -> Result<(usize, usize), EvalError> {
    let (rows, cols) = t.dims2().ok_or_else(|| EvalError::NotAMatrix {
        what,
        shape: t.shape().to_vec(),
    })?;
    if rows != labels.len() {
        return Err(EvalError::LabelCount {
            what,
            rows,
            labels: labels.len(),
        });
    }
    if let Some(flat) = t.data().iter().position(|v| !v.is_finite()) {
        return Err(EvalError::NonFiniteFeature {
            what,
            row: flat / cols,
        });
    }
    Ok((rows, cols))
}

fn per_query_stats(
    qd: &[f64],
    ql: &[usize],
    gd: &[f64],
    gl: &[usize],
    d: usize,
    nq: usize,
    ng: usize,
) -> Vec<QueryStat> {
    let one = |qi: usize| query_stat(&qd[qi * d..(qi + 1) * d], ql[qi], gd, gl, d, ng);
    #[cfg(feature = "parallel")]
    if crate::parallel::is_enabled() && nq >= 2 {
        return (0..nq).into_par_iter().map(one).collect();
    }
    (0..nq).map(one).collect()
}

fn query_stat(qrow: &[f64], qlabel: usize, gd: &[f64], gl: &[usize], d: usize, ng: usize) -> QueryStat {
    let mut sims: Vec<f64> = Vec::with_capacity(ng);
    for g in 0..ng {
        let grow = &gd[g * d..(g + 1) * d];
        sims.push(qrow.iter().zip(grow).map(|(a, b)| a * b).sum());
    }
    let mut order: Vec<usize> = (0..ng).collect();
    order.sort_by(|&a, &b| {
        sims[b]
            .partial_cmp(&sims[a])
            .expect("similarities are finite")
            .then(a.cmp(&b))
    });
    let relevant = gl.iter().filter(|&&l| l == qlabel).count();
    if relevant == 0 {
        return QueryStat {
            ap: 0.0,
            top1: false,
            valid: false,
        };
    }
    let mut hits = 0usize;
    let mut ap = 0.0;
    for (pos, &g) in order.iter().enumerate() {
        if gl[g] == qlabel {
            hits += 1;
            ap += hits as f64 / (pos + 1) as f64;
        }
    }
    QueryStat {
        ap: ap / relevant as f64,
        top1: gl[order[0]] == qlabel,
        valid: true,
    }
}

/// Expected mAP of a random ranking: mean over valid queries of the
/// relevant fraction of the gallery.
pub fn chance_map(query_labels: &[usize], gallery_labels: &[usize]) -> f64 {
    let ng = gallery_labels.len();
    let mut sum = 0.0;
    let mut valid = 0usize;
    for &q in query_labels {
        let r = gallery_labels.iter().filter(|&&l| l == q).count();
        if r > 0 {
            sum += r as f64 / ng as f64;
            valid += 1;
        }
    }
    if valid == 0 {
        0.0
    } else {
        sum / valid as f64
    }
}

/// Chance level of cross-model mAP between unrelated embedders. Two
/// embedders with no shared structure still each score a gallery class
/// coherently, so the structureless baseline ranks whole label blocks in
/// uniform random order, not individual items; that expectation sits well
/// above [`chance_map`] when classes are few. Computed from label
/// frequencies alone. Queries whose label is absent from the gallery are
/// skipped, mirroring [`map_r1`].
pub fn block_chance_map(query_labels: &[usize], gallery_labels: &[usize]) -> f64 {
    let mut sizes: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in gallery_labels {
        *sizes.entry(l).or_insert(0) += 1;
    }
    // precision sum once the block starts after m other items
    let ap_from = |m: usize, n: usize| -> f64 {
        (1..=n).map(|j| j as f64 / (m + j) as f64).sum::<f64>() / n as f64
    };
    let mut per_label: BTreeMap<usize, f64> = BTreeMap::new();
    let mut expected = |label: usize| -> Option<f64> {
        let &own = sizes.get(&label)?;
        if let Some(&e) = per_label.get(&label) {
            return Some(e);
        }
        let others: Vec<usize> = sizes
            .iter()
            .filter(|&(&l, _)| l != label)
            .map(|(_, &n)| n)
            .collect();
        // count[t][m]: t-subsets of the other blocks totalling m items;
        // counts stay below 2^53 for any desk-scale class count
        let total: usize = others.iter().sum();
        let mut count = vec![vec![0.0f64; total + 1]; others.len() + 1];
        count[0][0] = 1.0;
        for &s in &others {
            for t in (0..others.len()).rev() {
                for m in (0..=total.saturating_sub(s)).rev() {
                    if count[t][m] > 0.0 {
                        count[t + 1][m + s] += count[t][m];
                    }
                }
            }
        }
        let blocks = others.len() + 1;
        let mut e = 0.0;
        let mut binom = 1.0; // C(others.len(), t)
        for t in 0..=others.len() {
            if t > 0 {
                binom *= (others.len() - t + 1) as f64 / t as f64;
            }
            for (m, &c) in count[t].iter().enumerate() {
                if c > 0.0 {
                    e += c / (blocks as f64 * binom) * ap_from(m, own);
                }
            }
        }
        per_label.insert(label, e);
        Some(e)
    };
    let mut sum = 0.0;
    let mut valid = 0usize;
    for &q in query_labels {
        if let Some(e) = expected(q) {
            sum += e;
            valid += 1;
        }
    }
    if valid == 0 {
        0.0
    } else {
        sum / valid as f64
    }
}

/// Evaluates every (query slice, gallery slice) pair of one checkpoint on
/// the dataset's query/gallery splits.
pub fn compat_matrix(
    model: &SwitchableModel,
    set: &LabeledVectorSet,
    ratios: &[f64],
    checkpoint_id: &str,
    dataset_id: &str,
) -> Result<CompatMatrix, EvalError> {
    if ratios.is_empty() {
        return Err(EvalError::NoRatios);
    }
    let mut grid: Vec<f64> = ratios.to_vec();
    if !grid.iter().any(|&r| r == 1.0) {
        grid.push(1.0);
    }
    grid.sort_by(|a, b| a.partial_cmp(b).expect("ratios are finite"));
    grid.dedup();
    let mut query_feats = Vec::with_capacity(grid.len());
    let mut gallery_feats = Vec::with_capacity(grid.len());
    for &r in &grid {
        query_feats.push(extract_features(model, r, set, Split::Query)?);
        gallery_feats.push(extract_features(model, r, set, Split::Gallery)?);
    }
    let mut entries = Vec::with_capacity(grid.len() * grid.len());
    let mut meta_counts = None;
    for (qi, &q) in grid.iter().enumerate() {
        for (gi, &g) in grid.iter().enumerate() {
            let (qf, ql) = &query_feats[qi];
            let (gf, gl) = &gallery_feats[gi];
            let m = map_r1(qf, ql, gf, gl)?;
            meta_counts.get_or_insert((m.queries + m.skipped, m.skipped));
            entries.push(CompatEntry {
                q,
                g,
                map: m.map,
                r1: m.r1,
            });
        }
    }
    let (queries, skipped_queries) = meta_counts.expect("grid is non-empty");
    Ok(CompatMatrix {
        ratios: grid,
        metric: String::from("cosine"),
        entries,
        metadata: CompatMetadata {
            checkpoint: checkpoint_id.to_string(),
            dataset: dataset_id.to_string(),
            queries,
            skipped_queries,
            l2_normalized: true,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use crate::model::Architecture;
    use proptest::prelude::*;

    fn mat(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        Tensor::matrix(rows, cols, data).unwrap()
    }

    #[test]
    fn perfect_and_inverted_rankings() {
        let q = mat(1, 2, vec![1.0, 0.0]);
        let g = mat(2, 2, vec![0.9, 0.1, 0.1, 0.9]);
        let m = map_r1(&q, &[0], &g, &[0, 1]).unwrap();
        assert_eq!(m.map, 1.0);
        assert_eq!(m.r1, 1.0);
        assert_eq!((m.queries, m.skipped), (1, 0));

        // correct item ranked second of two
        let m = map_r1(&q, &[1], &g, &[0, 1]).unwrap();
        assert_eq!(m.map, 0.5);
        assert_eq!(m.r1, 0.0);
    }

    #[test]
    fn ties_break_by_gallery_index() {
        let q = mat(1, 2, vec![1.0, 0.0]);
        // identical similarity; index 0 wins the tie
        let g = mat(2, 2, vec![0.5, 0.0, 0.5, 0.0]);
        let m = map_r1(&q, &[1], &g, &[0, 1]).unwrap();
        assert_eq!(m.r1, 0.0);
        let m = map_r1(&q, &[0], &g, &[0, 1]).unwrap();
        assert_eq!(m.r1, 1.0);
    }

    #[test]
    fn queries_without_relevant_items_are_skipped() {
        let q = mat(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let g = mat(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        // label 5 never occurs in the gallery
        let m = map_r1(&q, &[0, 5], &g, &[0, 0]).unwrap();
        assert_eq!((m.queries, m.skipped), (1, 1));
        assert_eq!(m.map, 1.0);
        assert!(matches!(
            map_r1(&q, &[5, 5], &g, &[0, 0]),
            Err(EvalError::NoValidQueries)
        ));
    }

    #[test]
    fn input_validation() {
        let q = mat(1, 2, vec![1.0, 0.0]);
        let g3 = mat(1, 3, vec![1.0, 0.0, 0.0]);
        assert!(matches!(
            map_r1(&q, &[0], &g3, &[0]),
            Err(EvalError::DimMismatch { query: 2, gallery: 3 })
        ));
        assert!(matches!(
            map_r1(&q, &[0, 1], &q, &[0]),
            Err(EvalError::LabelCount { what: "query", .. })
        ));
        let bad = mat(1, 2, vec![f64::NAN, 0.0]);
        assert!(matches!(
            map_r1(&bad, &[0], &q, &[0]),
            Err(EvalError::NonFiniteFeature { what: "query", row: 0 })
        ));
    }

    // independent AP by pair counting: rank of item j = 1 + #{i beats j},
    // precision at j = #{relevant at or before j} / rank
    fn brute_metrics(qd: &[f64], ql: &[usize], gd: &[f64], gl: &[usize], d: usize) -> (f64, f64) {
        let beats = |sims: &[f64], i: usize, j: usize| {
            sims[i] > sims[j] || (sims[i] == sims[j] && i < j)
        };
        let mut aps = Vec::new();
        let mut top1 = 0usize;
        for (qi, &qlabel) in ql.iter().enumerate() {
            let qrow = &qd[qi * d..(qi + 1) * d];
            let sims: Vec<f64> = (0..gl.len())
                .map(|g| {
                    qrow.iter()
                        .zip(&gd[g * d..(g + 1) * d])
                        .map(|(a, b)| a * b)
                        .sum()
                })
                .collect();
            let rel: Vec<usize> = (0..gl.len()).filter(|&g| gl[g] == qlabel).collect();
            if rel.is_empty() {
                continue;
            }
            let mut terms: Vec<(usize, f64)> = rel
                .iter()
                .map(|&j| {
                    let rank = 1 + (0..gl.len()).filter(|&i| beats(&sims, i, j)).count();
                    let before = rel.iter().filter(|&&r| r == j || beats(&sims, r, j)).count();
                    (rank, before as f64 / rank as f64)
                })
                .collect();
            terms.sort_by_key(|&(rank, _)| rank);
            let ap: f64 = terms.iter().map(|&(_, p)| p).sum::<f64>() / rel.len() as f64;
            aps.push(ap);
            let best = (0..gl.len())
                .min_by_key(|&j| 1 + (0..gl.len()).filter(|&i| beats(&sims, i, j)).count())
                .unwrap();
            if gl[best] == qlabel {
                top1 += 1;
            }
        }
        (
            aps.iter().sum::<f64>() / aps.len() as f64,
            top1 as f64 / aps.len() as f64,
        )
    }

    #[test]
    fn agrees_with_pair_counting_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let d = 4;
        let (nq, ng) = (8, 20);
        let qd: Vec<f64> = (0..nq * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let gd: Vec<f64> = (0..ng * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ql: Vec<usize> = (0..nq).map(|_| rng.random_range(0..4)).collect();
        let gl: Vec<usize> = (0..ng).map(|_| rng.random_range(0..4)).collect();
        let m = map_r1(
            &mat(nq, d, qd.clone()),
            &ql,
            &mat(ng, d, gd.clone()),
            &gl,
        )
        .unwrap();
        let (bmap, br1) = brute_metrics(&qd, &ql, &gd, &gl, d);
        assert_eq!(m.map, bmap);
        assert_eq!(m.r1, br1);
    }

    fn trained_free_model() -> (SwitchableModel, LabeledVectorSet) {
        let arch = Architecture {
            input_dim: 8,
            hidden_widths: vec![16, 16],
            feature_dim: 8,
            num_classes: 5,
        };
        let model = SwitchableModel::build(arch, &[0.5], 0.1, 77).unwrap();
        let set = generate_synthetic(&SyntheticSpec {
            classes: 5,
            samples_per_class: 20,
            dim: 8,
            center_scale: 1.0,
            noise_sigma: 0.3,
            seed: 3,
        })
        .unwrap();
        (model, set)
    }

    #[test]
    fn extracted_rows_are_unit_norm_and_deterministic() {
        let (model, set) = trained_free_model();
        for &ratio in &[0.5, 1.0] {
            let (f, labels) = extract_features(&model, ratio, &set, Split::Query).unwrap();
            let (rows, cols) = f.dims2().unwrap();
            assert_eq!(cols, 8);
            assert_eq!(rows, labels.len());
            for r in 0..rows {
                let norm: f64 = f.data()[r * cols..(r + 1) * cols]
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt();
                assert!((norm - 1.0).abs() < 1e-9);
            }
            let (f2, _) = extract_features(&model, ratio, &set, Split::Query).unwrap();
            assert_eq!(f.data(), f2.data());
        }
    }

    #[test]
    fn compat_grid_is_complete_and_serializable() {
        let (model, set) = trained_free_model();
        let m = compat_matrix(&model, &set, &[0.5, 1.0], "ck", "ds").unwrap();
        assert_eq!(m.ratios, vec![0.5, 1.0]);
        assert_eq!(m.entries.len(), 4);
        for e in &m.entries {
            assert!(e.map >= 0.0 && e.map <= 1.0);
            assert!(e.r1 >= 0.0 && e.r1 <= 1.0);
        }
        assert!(m.metadata.l2_normalized);
        assert_eq!(m.metadata.skipped_queries, 0);
        let json = serde_json::to_string(&m).unwrap();
        let back: CompatMatrix = serde_json::from_str(&json).unwrap();
        assert_eq!(m, back);
        let table = m.render_table();
        assert!(table.contains("q\\g"));
        assert_eq!(table.lines().count(), 3);
        // 1.0 joins the grid even if omitted
        let m = compat_matrix(&model, &set, &[0.5], "ck", "ds").unwrap();
        assert_eq!(m.ratios, vec![0.5, 1.0]);
    }

    #[test]
    fn chance_level_is_relevant_fraction() {
        // 2 of 4 gallery items share each query's label
        let ql = [0, 1];
        let gl = [0, 0, 1, 1];
        assert!((chance_map(&ql, &gl) - 0.5).abs() < 1e-15);
        assert_eq!(chance_map(&[9], &gl), 0.0);
    }

    /// AP of one query against a gallery listed in rank order.
    fn ap_of_ranking(ranked_labels: &[usize], label: usize) -> f64 {
        let relevant = ranked_labels.iter().filter(|&&l| l == label).count();
        let mut hits = 0usize;
        let mut ap = 0.0;
        for (pos, &l) in ranked_labels.iter().enumerate() {
            if l == label {
                hits += 1;
                ap += hits as f64 / (pos + 1) as f64;
            }
        }
        ap / relevant as f64
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..n).collect();
        let mut all = vec![idx.clone()];
        // lexicographic successor until wrap
        while let Some(i) = (0..n - 1).rev().find(|&i| idx[i] < idx[i + 1]) {
            let j = (i + 1..n).rev().find(|&j| idx[j] > idx[i]).unwrap();
            idx.swap(i, j);
            idx[i + 1..].reverse();
            all.push(idx.clone());
        }
        all
    }

    #[test]
    fn block_chance_matches_exhaustive_block_orders() {
        // unequal blocks: sizes 2, 1, 3
        let blocks: [&[usize]; 3] = [&[0, 0], &[1], &[2, 2, 2]];
        let gallery = [0, 0, 1, 2, 2, 2];
        for label in 0..3usize {
            let orders = permutations(3);
            let mean: f64 = orders
                .iter()
                .map(|order| {
                    let ranked: Vec<usize> =
                        order.iter().flat_map(|&b| blocks[b].iter().copied()).collect();
                    ap_of_ranking(&ranked, label)
                })
                .sum::<f64>()
                / orders.len() as f64;
            let got = block_chance_map(&[label], &gallery);
            assert!(
                (mean - got).abs() < 1e-12,
                "label {label}: exhaustive {mean} vs closed form {got}"
            );
        }
        // queries average per label; absent labels are skipped
        let mixed = block_chance_map(&[0, 0, 2], &gallery);
        let direct = (2.0 * block_chance_map(&[0], &gallery) + block_chance_map(&[2], &gallery)) / 3.0;
        assert!((mixed - direct).abs() < 1e-15);
        assert_eq!(
            block_chance_map(&[0, 9], &gallery),
            block_chance_map(&[0], &gallery)
        );
        assert_eq!(block_chance_map(&[9], &gallery), 0.0);
        // a gallery of only relevant items is perfect retrieval under any order
        assert!((block_chance_map(&[3], &[3, 3]) - 1.0).abs() < 1e-15);
        // few large classes sit far above the per-item chance line
        let gl: Vec<usize> = (0..50).flat_map(|c| std::iter::repeat(c).take(30)).collect();
        let ql: Vec<usize> = (0..50).collect();
        let block = block_chance_map(&ql, &gl);
        let item = chance_map(&ql, &gl);
        assert!(block > 2.5 * item, "block {block} vs item {item}");
        assert!(block < 0.1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn oracle_parity_and_bounds(
            seed in 0u64..5000,
            nq in 1usize..6,
            ng in 2usize..24,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let d = 3;
            let qd: Vec<f64> = (0..nq * d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let gd: Vec<f64> = (0..ng * d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let ql: Vec<usize> = (0..nq).map(|_| rng.random_range(0..3)).collect();
            let gl: Vec<usize> = (0..ng).map(|_| rng.random_range(0..3)).collect();
            let any_valid = ql.iter().any(|q| gl.contains(q));
            prop_assume!(any_valid);
            let m = map_r1(&mat(nq, d, qd.clone()), &ql, &mat(ng, d, gd.clone()), &gl).unwrap();
            let (bmap, br1) = brute_metrics(&qd, &ql, &gd, &gl, d);
            prop_assert_eq!(m.map, bmap);
            prop_assert_eq!(m.r1, br1);
            prop_assert!((0.0..=1.0).contains(&m.map));
            prop_assert!((0.0..=1.0).contains(&m.r1));
        }

        // permuting gallery rows cannot change metrics when sims are distinct
        #[test]
        fn gallery_permutation_invariance(seed in 0u64..5000) {
            use rand::seq::SliceRandom;
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let d = 3;
            let ng = 12;
            let qd: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let gd: Vec<f64> = (0..ng * d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let gl: Vec<usize> = (0..ng).map(|_| rng.random_range(0..3)).collect();
            prop_assume!(gl.contains(&0));
            let sims: Vec<f64> = (0..ng)
                .map(|g| qd.iter().zip(&gd[g * d..(g + 1) * d]).map(|(a, b)| a * b).sum())
                .collect();
            let mut sorted = sims.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let distinct = sorted.windows(2).all(|w| w[0] != w[1]);
            prop_assume!(distinct);
            let mut perm: Vec<usize> = (0..ng).collect();
            perm.shuffle(&mut rng);
            let pgd: Vec<f64> = perm.iter().flat_map(|&g| gd[g * d..(g + 1) * d].to_vec()).collect();
            let pgl: Vec<usize> = perm.iter().map(|&g| gl[g]).collect();
            let a = map_r1(&mat(1, d, qd.clone()), &[0], &mat(ng, d, gd), &gl).unwrap();
            let b = map_r1(&mat(1, d, qd), &[0], &mat(ng, d, pgd), &pgl).unwrap();
            prop_assert_eq!(a.map, b.map);
            prop_assert_eq!(a.r1, b.r1);
        }
    }
}
