//! Query/key construction, score matrices, and sparse top-k selection.

use super::{AttentionMatrix, ATT_KEY, ATT_QUERY};
use crate::error::{Error, Result};
use crate::tensor::{BoundParams, Graph, NodeId};

/// q = X'[L-1, :] W^Q, a 1 x N row from the target's final hidden state.
pub fn make_query(graph: &mut Graph, bound: &BoundParams, encoding: NodeId) -> Result<NodeId> {
    let (rows, cols) = graph.value(encoding).shape();
    let last = graph.slice(encoding, rows - 1, rows, 0, cols)?;
    let wq = bound.node(ATT_QUERY)?;
    graph.matmul(last, wq)
}

/// K = X'[L-lag_count .. L, :] W^K. Key row j encodes lag
/// `lag_count - j`, i.e., the candidate's day t - lag + 1.
pub fn make_keys(
    graph: &mut Graph,
    bound: &BoundParams,
    encoding: NodeId,
    lag_count: usize,
) -> Result<NodeId> {
    let (rows, cols) = graph.value(encoding).shape();
    if lag_count == 0 || lag_count > rows {
        return Err(Error::Dim(format!(
            "lag count {lag_count} outside 1..={rows} encoder steps"
        )));
    }
    let recent = graph.slice(encoding, rows - lag_count, rows, 0, cols)?;
    let wk = bound.node(ATT_KEY)?;
    graph.matmul(recent, wk)
}

/// Stack q K_v^T rows for each candidate into one (candidates x lags)
/// score node plus its snapshot as an [`AttentionMatrix`]. Scores are raw
/// dot products: no scaling, no normalization before selection.
pub fn attention_scores(
    graph: &mut Graph,
    query: NodeId,
    keys: &[(usize, NodeId)],
    target: usize,
    date_index: usize,
) -> Result<(NodeId, AttentionMatrix)> {
    if keys.is_empty() {
        return Err(Error::Dim("no candidate keys to score".into()));
    }
    let mut rows = Vec::with_capacity(keys.len());
    for &(_, k) in keys {
        let kt = graph.transpose(k);
        rows.push(graph.matmul(query, kt)?);
    }
    let scores = graph.concat_rows(&rows)?;
    let snapshot = graph.value(scores).clone();
    if !snapshot.is_finite() {
        return Err(Error::Domain(format!(
            "non-finite attention score for target {target} at date {date_index}"
        )));
    }
    let matrix = AttentionMatrix {
        target,
        date_index,
        candidates: keys.iter().map(|&(c, _)| c).collect(),
        lag_count: snapshot.cols(),
        scores: snapshot,
    };
    Ok((scores, matrix))
}

/// Positions of the k largest entries, ordered by value descending with
/// ties broken by (row, then column) ascending. The returned indices are
/// constants of any backward pass; gradients flow only through the score
/// values gathered at them.
pub fn topk_positions(scores: &crate::tensor::Array, k: usize) -> Result<Vec<(usize, usize)>> {
    if k == 0 || k > scores.len() {
        return Err(Error::Contract(format!(
            "top-k needs 1..={} selections, got {k}",
            scores.len()
        )));
    }
    if !scores.is_finite() {
        return Err(Error::Domain("non-finite attention score".into()));
    }
    let cols = scores.cols();
    let mut cells: Vec<(usize, usize)> = (0..scores.rows())
        .flat_map(|r| (0..cols).map(move |c| (r, c)))
        .collect();
    cells.sort_by(|&(r1, c1), &(r2, c2)| {
        scores
            .get(r2, c2)
            .partial_cmp(&scores.get(r1, c1))
            .expect("scores checked finite")
            .then(r1.cmp(&r2))
            .then(c1.cmp(&c2))
    });
    cells.truncate(k);
    Ok(cells)
}

/// Numerically stable softmax of a small score slice.
pub fn softmax_slice(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::tensor::{Array, ParamSet};

    const N: usize = 3;

    fn identity(n: usize) -> Array {
        let mut m = Array::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    fn bound_identity_params(graph: &mut Graph) -> crate::tensor::BoundParams {
        let mut params = ParamSet::new();
        params.insert(ATT_QUERY, identity(N));
        params.insert(ATT_KEY, identity(N));
        params.bind(graph)
    }

    fn encoding(graph: &mut Graph, rows: &[[f64; N]]) -> NodeId {
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        graph.constant(Array::from_vec(rows.len(), N, flat))
    }

    #[test]
    fn identity_query_is_the_last_hidden_row() {
        let mut g = Graph::new();
        let bound = bound_identity_params(&mut g);
        let enc = encoding(&mut g, &[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        let q = make_query(&mut g, &bound, enc).unwrap();
        assert_eq!(g.value(q).shape(), (1, N));
        assert_eq!(g.value(q).data(), &[4.0, 5.0, 6.0]);
        // A single-row encoding uses its sole row.
        let enc1 = encoding(&mut g, &[[7.0, 8.0, 9.0]]);
        let q1 = make_query(&mut g, &bound, enc1).unwrap();
        assert_eq!(g.value(q1).data(), &[7.0, 8.0, 9.0]);
    }

    #[test]
    fn identity_keys_are_the_recent_rows() {
        let mut g = Graph::new();
        let bound = bound_identity_params(&mut g);
        let enc = encoding(
            &mut g,
            &[[1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 3.0]],
        );
        let keys = make_keys(&mut g, &bound, enc, 2).unwrap();
        assert_eq!(g.value(keys).shape(), (2, N));
        assert_eq!(g.value(keys).row(0), &[0.0, 2.0, 0.0]);
        assert_eq!(g.value(keys).row(1), &[0.0, 0.0, 3.0]);
        // lag_count = L covers every timestep; 1 keeps only the last.
        let all = make_keys(&mut g, &bound, enc, 3).unwrap();
        assert_eq!(g.value(all).shape(), (3, N));
        let last = make_keys(&mut g, &bound, enc, 1).unwrap();
        assert_eq!(g.value(last).row(0), &[0.0, 0.0, 3.0]);
        assert!(make_keys(&mut g, &bound, enc, 4).is_err());
    }

    #[test]
    fn scores_match_hand_computed_dot_products() {
        let mut g = Graph::new();
        let q = g.constant(Array::from_vec(1, 2, vec![1.0, 2.0]));
        // Candidate 7: keys [[1,0],[0,1]]; candidate 9: keys [[2,1],[-1,3]].
        let k7 = g.constant(Array::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
        let k9 = g.constant(Array::from_vec(2, 2, vec![2.0, 1.0, -1.0, 3.0]));
        let (node, matrix) =
            attention_scores(&mut g, q, &[(7, k7), (9, k9)], 3, 41).unwrap();
        assert_eq!(g.value(node).shape(), (2, 2));
        assert_eq!(matrix.scores.row(0), &[1.0, 2.0]);
        assert_eq!(matrix.scores.row(1), &[4.0, 5.0]);
        assert_eq!(matrix.candidates, vec![7, 9]);
        assert_eq!(matrix.target, 3);
        assert_eq!(matrix.date_index, 41);
        assert_eq!(matrix.lag_count, 2);
        assert_eq!(matrix.lag_of_column(0), 2);
        assert_eq!(matrix.lag_of_column(1), 1);
    }

    #[test]
    fn zero_or_orthogonal_queries_score_zero() {
        let mut g = Graph::new();
        let zero_q = g.constant(Array::zeros(1, 2));
        let k = g.constant(Array::from_vec(1, 2, vec![3.0, -2.0]));
        let (_, m) = attention_scores(&mut g, zero_q, &[(0, k)], 1, 0).unwrap();
        assert_eq!(m.scores.data(), &[0.0]);
        let q = g.constant(Array::from_vec(1, 2, vec![1.0, 1.0]));
        let ortho = g.constant(Array::from_vec(2, 2, vec![1.0, -1.0, -2.0, 2.0]));
        let (_, m) = attention_scores(&mut g, q, &[(0, ortho)], 1, 0).unwrap();
        assert_eq!(m.scores.data(), &[0.0, 0.0]);
    }

    #[test]
    fn topk_enumerated_example() {
        let a = Array::from_vec(2, 2, vec![0.5, 0.9, 0.1, 0.7]);
        // Largest 0.9 at (0,1), then 0.7 at (1,1): with lag_count 2 those
        // are (candidate 0, lag 1) and (candidate 1, lag 1).
        assert_eq!(topk_positions(&a, 2).unwrap(), vec![(0, 1), (1, 1)]);
        assert_eq!(topk_positions(&a, 1).unwrap(), vec![(0, 1)]);
        assert_eq!(
            topk_positions(&a, 4).unwrap(),
            vec![(0, 1), (1, 1), (0, 0), (1, 0)]
        );
    }

    #[test]
    fn topk_ties_break_by_row_then_column() {
        let a = Array::filled(2, 3, 1.25);
        assert_eq!(topk_positions(&a, 2).unwrap(), vec![(0, 0), (0, 1)]);
        assert_eq!(
            topk_positions(&a, 4).unwrap(),
            vec![(0, 0), (0, 1), (0, 2), (1, 0)]
        );
    }

    #[test]
    fn topk_rejects_bad_k_and_non_finite_scores() {
        let a = Array::filled(2, 2, 0.0);
        assert!(matches!(topk_positions(&a, 0), Err(Error::Contract(_))));
        assert!(matches!(topk_positions(&a, 5), Err(Error::Contract(_))));
        let mut bad = Array::filled(2, 2, 0.0);
        bad.set(1, 1, f64::NAN);
        assert!(matches!(topk_positions(&bad, 1), Err(Error::Domain(_))));
    }

    #[test]
    fn softmax_slice_oracle() {
        let w = softmax_slice(&[std::f64::consts::LN_2, 0.0]);
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((w[1] - 1.0 / 3.0).abs() < 1e-12);
        // Equal scores average; huge scores stay finite.
        let eq = softmax_slice(&[5.0, 5.0]);
        assert_eq!(eq, vec![0.5, 0.5]);
        let big = softmax_slice(&[1e6, 1e6 - 1.0]);
        assert!(big.iter().all(|x| x.is_finite()));
        assert!((big.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn permuting_candidates_permutes_rows_and_preserves_the_selection() {
        let mut g = Graph::new();
        let q = g.constant(Array::from_vec(1, 2, vec![0.3, -1.1]));
        let keys: Vec<Array> = vec![
            Array::from_vec(2, 2, vec![0.2, 0.7, -0.4, 0.9]),
            Array::from_vec(2, 2, vec![1.4, -0.3, 0.6, 0.1]),
            Array::from_vec(2, 2, vec![-0.8, 0.5, 0.05, -0.6]),
        ];
        let ids: Vec<NodeId> = keys.iter().map(|k| g.constant(k.clone())).collect();
        let order_a = [(10, ids[0]), (11, ids[1]), (12, ids[2])];
        let order_b = [(12, ids[2]), (10, ids[0]), (11, ids[1])];
        let (_, ma) = attention_scores(&mut g, q, &order_a, 0, 0).unwrap();
        let (_, mb) = attention_scores(&mut g, q, &order_b, 0, 0).unwrap();
        for (row_b, &cand) in mb.candidates.iter().enumerate() {
            let row_a = ma.candidates.iter().position(|&c| c == cand).unwrap();
            assert_eq!(ma.scores.row(row_a), mb.scores.row(row_b));
        }
        let pick = |m: &AttentionMatrix| -> Vec<(usize, usize, f64)> {
            let mut v: Vec<_> = topk_positions(&m.scores, 3)
                .unwrap()
                .into_iter()
                .map(|(r, c)| (m.candidates[r], m.lag_of_column(c), m.scores.get(r, c)))
                .collect();
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v
        };
        assert_eq!(pick(&ma), pick(&mb));
    }

    proptest! {
        #[test]
        fn selected_scores_dominate_unselected(
            values in prop::collection::vec(-1.0f64..1.0, 6),
            k in 1usize..6,
        ) {
            let a = Array::from_vec(2, 3, values);
            let picked = topk_positions(&a, k).unwrap();
            let worst_picked = picked
                .iter()
                .map(|&(r, c)| a.get(r, c))
                .fold(f64::INFINITY, f64::min);
            for r in 0..2 {
                for c in 0..3 {
                    if !picked.contains(&(r, c)) {
                        prop_assert!(a.get(r, c) <= worst_picked);
                    }
                }
            }
        }

        #[test]
        fn softmax_weights_sum_to_one(scores in prop::collection::vec(-50.0f64..50.0, 1..6)) {
            let w = softmax_slice(&scores);
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(w.iter().all(|&x| x > 0.0));
        }
    }
}
