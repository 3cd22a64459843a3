//! Residual-stream forking: score each stream, select the top-k keep/fork
//! actions under a budget, and assemble the next stream set.
//!
//! Scores live entirely in log space. Selection is hard (no straight-through
//! relaxation): gradients reach the scoring affine map only through the
//! attenuation and output-averaging paths of surviving streams.

use crate::error::{Error, Result};
use crate::tape::Node;
use crate::trace::{Action, ForkEvent};

/// Per-stream bookkeeping. A set only ever contains live streams; the
/// differentiable cumulative log-score is carried next to the stream matrix
/// in [`ResidualSet::log_cum`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamMeta {
    /// Input-token index this stream descends from.
    pub origin: usize,
    /// Position within the token group: 0 is the original (rightmost) stream,
    /// ranks grow leftward. Recomputed positionally at every assembly, so a
    /// fork created immediately left of its parent gets the parent's rank + 1.
    pub fork_rank: usize,
}

impl StreamMeta {
    pub fn is_original(&self) -> bool {
        self.fork_rank == 0
    }
}

/// The live set of streams at one point in the network. Rows are ordered so
/// token groups follow input order and every fork sits left of its parent;
/// the original is the rightmost row of its group.
pub struct ResidualSet {
    /// Stream matrix, n_alive x d_model.
    pub streams: Node,
    /// Cumulative log-scores ln p_cum, n_alive x 1, entries <= 0.
    pub log_cum: Node,
    pub meta: Vec<StreamMeta>,
}

impl ResidualSet {
    pub fn n_alive(&self) -> usize {
        self.meta.len()
    }

    /// Number of distinct input tokens represented (count of originals).
    pub fn n_originals(&self) -> usize {
        self.meta.iter().filter(|m| m.is_original()).count()
    }

    /// Row indices of each token group, in input order, left to right.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        let mut groups: Vec<Vec<usize>> = Vec::new();
        for (row, m) in self.meta.iter().enumerate() {
            if groups.len() <= m.origin {
                groups.resize_with(m.origin + 1, Vec::new);
            }
            groups[m.origin].push(row);
        }
        groups
    }

    /// Structural invariants: ordering, ranks, one original per token, budget.
    pub fn validate(&self, kappa: usize) -> Result<()> {
        if self.n_alive() > kappa {
            return Err(Error::Arg(format!(
                "{} live streams exceed budget {kappa}",
                self.n_alive()
            )));
        }
        let (rows, _) = self.streams.shape();
        let (lrows, lcols) = self.log_cum.shape();
        if rows != self.meta.len() || lrows != self.meta.len() || lcols != 1 {
            return Err(Error::Dim("stream/meta/log_cum row mismatch".into()));
        }
        let lc = self.log_cum.value();
        let mut expect_origin = 0usize;
        let mut row = 0usize;
        while row < self.meta.len() {
            let origin = self.meta[row].origin;
            if origin != expect_origin {
                return Err(Error::Arg(format!(
                    "token group {origin} out of order at row {row}"
                )));
            }
            let mut group = Vec::new();
            while row < self.meta.len() && self.meta[row].origin == origin {
                group.push(row);
                row += 1;
            }
            for (i, &r) in group.iter().enumerate() {
                let want = group.len() - 1 - i;
                if self.meta[r].fork_rank != want {
                    return Err(Error::Arg(format!(
                        "row {r}: fork_rank {} but positional rank {want}",
                        self.meta[r].fork_rank
                    )));
                }
                if lc.data[r] > 0.0 {
                    return Err(Error::Arg(format!(
                        "row {r}: log_cum {} > 0",
                        lc.data[r]
                    )));
                }
            }
            expect_origin += 1;
        }
        Ok(())
    }
}

/// Bound parameters of one forking layer.
pub struct ForkLayerNodes {
    /// Affine decision map, d_model x 2 (column 0 fork, column 1 keep).
    pub weight: Node,
    /// 1 x 2 bias.
    pub bias: Node,
    /// Learned fork embedding added to each new fork, 1 x d_model.
    pub embed: Node,
}

/// Log fork/keep scores before and after the cumulative update, plus the
/// forced-keep values used only by selection.
pub struct ForkScores {
    pub log_fork: Node,
    pub log_keep: Node,
    /// log_cum + log_fork.
    pub log_fork_hat: Node,
    /// log_cum + log_keep (never forced; becomes the kept stream's log_cum).
    pub log_keep_hat: Node,
    /// Selection-side keep scores: exactly 0 for fork_rank-0 rows.
    pub log_keep_forced: Vec<f64>,
}

impl ForkScores {
    pub fn n(&self) -> usize {
        self.log_keep_forced.len()
    }

    /// Build scores directly from log-score vectors (used by the oracle
    /// suites and randomized tests; the model path goes through
    /// [`score_streams`]).
    pub fn synthetic(
        tape: &crate::tape::Tape,
        log_cum: &[f64],
        log_fork: &[f64],
        log_keep: &[f64],
        meta: &[StreamMeta],
    ) -> ForkScores {
        let cum = tape.leaf(crate::matrix::Matrix::col(log_cum));
        let lf = tape.leaf(crate::matrix::Matrix::col(log_fork));
        let lk = tape.leaf(crate::matrix::Matrix::col(log_keep));
        let fork_hat = cum.add(&lf);
        let keep_hat = cum.add(&lk);
        let forced = forced_keep(&keep_hat, meta);
        ForkScores {
            log_fork: lf,
            log_keep: lk,
            log_fork_hat: fork_hat,
            log_keep_hat: keep_hat,
            log_keep_forced: forced,
        }
    }
}

fn forced_keep(log_keep_hat: &Node, meta: &[StreamMeta]) -> Vec<f64> {
    let v = log_keep_hat.value();
    meta.iter()
        .enumerate()
        .map(|(r, m)| if m.is_original() { 0.0 } else { v.data[r] })
        .collect()
}

/// Apply the forking decision map and sigmoid in log space, then the
/// cumulative update and the forced-keep override.
pub fn score_streams(set: &ResidualSet, params: &ForkLayerNodes) -> Result<ForkScores> {
    let raw = set.streams.matmul(&params.weight)?.add_row(&params.bias);
    let ls = raw.logsigmoid();
    let log_fork = ls.slice_cols(0, 1);
    let log_keep = ls.slice_cols(1, 1);
    let log_fork_hat = set.log_cum.add(&log_fork);
    let log_keep_hat = set.log_cum.add(&log_keep);
    let log_keep_forced = forced_keep(&log_keep_hat, &set.meta);
    Ok(ForkScores {
        log_fork,
        log_keep,
        log_fork_hat,
        log_keep_hat,
        log_keep_forced,
    })
}

/// Which of the 2n candidate actions survived the top-k.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionSet {
    pub keep: Vec<bool>,
    pub fork: Vec<bool>,
}

impl SelectionSet {
    pub fn n_selected(&self) -> usize {
        self.keep.iter().chain(&self.fork).filter(|&&b| b).count()
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Kind {
    Keep,
    Fork,
}

/// Descending by score; ties prefer keep over fork, then the lower row.
fn candidate_order(a: &(f64, Kind, usize), b: &(f64, Kind, usize)) -> std::cmp::Ordering {
    b.0.partial_cmp(&a.0)
        .expect("scores must not be NaN")
        .then_with(|| match (a.1, b.1) {
            (Kind::Keep, Kind::Fork) => std::cmp::Ordering::Less,
            (Kind::Fork, Kind::Keep) => std::cmp::Ordering::Greater,
            _ => std::cmp::Ordering::Equal,
        })
        .then(a.2.cmp(&b.2))
}

fn candidates(scores: &ForkScores) -> Vec<(f64, Kind, usize)> {
    let fork_hat = scores.log_fork_hat.value();
    let mut out = Vec::with_capacity(2 * scores.n());
    for r in 0..scores.n() {
        out.push((fork_hat.data[r], Kind::Fork, r));
        out.push((scores.log_keep_forced[r], Kind::Keep, r));
    }
    out
}

/// Keep the kappa best of the 2n candidate actions. Forced keeps (score 0 in
/// log space) strictly beat every sigmoid-derived score, so each original
/// survives whenever kappa covers the originals.
pub fn select_topk(
    scores: &ForkScores,
    kappa: usize,
    meta: &[StreamMeta],
) -> Result<SelectionSet> {
    let originals = meta.iter().filter(|m| m.is_original()).count();
    if kappa < originals || kappa == 0 {
        return Err(Error::Budget {
            kappa,
            originals,
        });
    }
    let mut cands = candidates(scores);
    let take = kappa.min(cands.len());
    if take < cands.len() {
        // quickselect partitions the top `take` in front; a full sort of the
        // remainder is never needed
        cands.select_nth_unstable_by(take, candidate_order);
        cands.truncate(take);
    }
    let mut sel = SelectionSet {
        keep: vec![false; scores.n()],
        fork: vec![false; scores.n()],
    };
    for (_, kind, row) in cands {
        match kind {
            Kind::Keep => sel.keep[row] = true,
            Kind::Fork => sel.fork[row] = true,
        }
    }
    Ok(sel)
}

/// Result of one assembly: the new set, the emitted trace events, and the
/// old-set row each new row descends from.
pub struct ForkOutcome {
    pub set: ResidualSet,
    pub events: Vec<ForkEvent>,
    pub src_rows: Vec<usize>,
}

/// Assemble the next stream set from a selection: kept rows copy through,
/// each selected fork inserts parent + fork-embedding immediately left of its
/// parent, unselected keeps delete their row. Fork ranks are recomputed
/// positionally per token group.
pub fn assemble(
    set: &ResidualSet,
    scores: &ForkScores,
    sel: &SelectionSet,
    fork_embed: &Node,
    layer: usize,
) -> Result<ForkOutcome> {
    let n = set.n_alive();
    assert_eq!(sel.keep.len(), n, "selection built from a different set");
    let fork_hat = scores.log_fork_hat.value();
    let keep_hat = scores.log_keep_hat.value();

    // New rows in left-to-right order. Scores for row r live at r (fork) and
    // n + r (keep) in the stacked score vector.
    let mut src_rows = Vec::new();
    let mut score_rows = Vec::new();
    let mut fork_positions = Vec::new();
    let mut origins = Vec::new();
    let mut events = Vec::new();
    for r in 0..n {
        let m = set.meta[r];
        if sel.fork[r] {
            fork_positions.push(src_rows.len());
            src_rows.push(r);
            score_rows.push(r);
            origins.push(m.origin);
        }
        if sel.keep[r] {
            src_rows.push(r);
            score_rows.push(n + r);
            origins.push(m.origin);
            events.push(ForkEvent {
                layer,
                token_index: m.origin,
                fork_rank: m.fork_rank,
                log_cum: keep_hat.data[r],
                action: Action::Keep,
            });
        } else {
            assert!(
                !m.is_original(),
                "selection deleted an original stream (unreachable)"
            );
            events.push(ForkEvent {
                layer,
                token_index: m.origin,
                fork_rank: m.fork_rank,
                log_cum: keep_hat.data[r],
                action: Action::Delete,
            });
        }
    }

    // Positional re-rank within each token group.
    let mut meta = vec![
        StreamMeta {
            origin: 0,
            fork_rank: 0
        };
        origins.len()
    ];
    let mut i = 0;
    while i < origins.len() {
        let origin = origins[i];
        let mut j = i;
        while j < origins.len() && origins[j] == origin {
            j += 1;
        }
        for (k, row) in (i..j).enumerate() {
            meta[row] = StreamMeta {
                origin,
                fork_rank: j - i - 1 - k,
            };
        }
        i = j;
    }
    for &pos in &fork_positions {
        events.push(ForkEvent {
            layer,
            token_index: meta[pos].origin,
            fork_rank: meta[pos].fork_rank,
            log_cum: fork_hat.data[src_rows[pos]],
            action: Action::Fork,
        });
    }

    let tape = set.streams.tape().clone();
    let streams = tape
        .gather_rows(&set.streams, &src_rows)
        .add_row_at(fork_embed, &fork_positions);
    let stacked = tape.concat_rows(&[scores.log_fork_hat.clone(), scores.log_keep_hat.clone()]);
    let log_cum = tape.gather_rows(&stacked, &score_rows);

    Ok(ForkOutcome {
        set: ResidualSet {
            streams,
            log_cum,
            meta,
        },
        events,
        src_rows,
    })
}

/// One full forking operation: score, select, assemble.
pub fn fork_step(
    set: &ResidualSet,
    params: &ForkLayerNodes,
    kappa: usize,
    layer: usize,
) -> Result<ForkOutcome> {
    let scores = score_streams(set, params)?;
    let sel = select_topk(&scores, kappa, &set.meta)?;
    assemble(set, &scores, &sel, &params.embed, layer)
}

/// Reference implementation used by the oracle suites: materialize all 2n
/// candidates, fully sort them with the documented tie-break, slice kappa.
/// Kept deliberately separate from the quickselect path it checks.
pub mod bruteforce {
    use super::*;

    pub fn select_topk(
        scores: &ForkScores,
        kappa: usize,
        meta: &[StreamMeta],
    ) -> Result<SelectionSet> {
        let originals = meta.iter().filter(|m| m.is_original()).count();
        if kappa < originals || kappa == 0 {
            return Err(Error::Budget { kappa, originals });
        }
        let mut cands = candidates(scores);
        cands.sort_by(candidate_order);
        cands.truncate(kappa.min(cands.len()));
        let mut sel = SelectionSet {
            keep: vec![false; scores.n()],
            fork: vec![false; scores.n()],
        };
        for (_, kind, row) in cands {
            match kind {
                Kind::Keep => sel.keep[row] = true,
                Kind::Fork => sel.fork[row] = true,
            }
        }
        Ok(sel)
    }

    /// Value-level assembly oracle: per-row walk applying the two membership
    /// rules directly, no tape involved.
    pub struct PlainAssembly {
        pub src_rows: Vec<usize>,
        pub is_fork: Vec<bool>,
        pub log_cum: Vec<f64>,
        pub meta: Vec<StreamMeta>,
    }

    pub fn assemble(
        meta: &[StreamMeta],
        sel: &SelectionSet,
        log_fork_hat: &[f64],
        log_keep_hat: &[f64],
    ) -> PlainAssembly {
        let mut out = PlainAssembly {
            src_rows: Vec::new(),
            is_fork: Vec::new(),
            log_cum: Vec::new(),
            meta: Vec::new(),
        };
        for r in 0..meta.len() {
            if sel.fork[r] {
                out.src_rows.push(r);
                out.is_fork.push(true);
                out.log_cum.push(log_fork_hat[r]);
                out.meta.push(StreamMeta {
                    origin: meta[r].origin,
                    fork_rank: 0,
                });
            }
            if sel.keep[r] {
                out.src_rows.push(r);
                out.is_fork.push(false);
                out.log_cum.push(log_keep_hat[r]);
                out.meta.push(StreamMeta {
                    origin: meta[r].origin,
                    fork_rank: 0,
                });
            }
        }
        // positional ranks, rightmost of each group = 0
        let n = out.meta.len();
        let mut i = 0;
        while i < n {
            let origin = out.meta[i].origin;
            let mut j = i;
            while j < n && out.meta[j].origin == origin {
                j += 1;
            }
            for (k, row) in (i..j).enumerate() {
                out.meta[row].fork_rank = j - i - 1 - k;
            }
            i = j;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;
    use crate::tape::Tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fresh_set(tape: &Tape, n_tokens: usize, d: usize, rng: &mut ChaCha8Rng) -> ResidualSet {
        ResidualSet {
            streams: tape.leaf(Matrix::randn(n_tokens, d, 1.0, rng)),
            log_cum: tape.leaf(Matrix::zeros(n_tokens, 1)),
            meta: (0..n_tokens)
                .map(|i| StreamMeta {
                    origin: i,
                    fork_rank: 0,
                })
                .collect(),
        }
    }

    fn fork_params(tape: &Tape, d: usize, rng: &mut ChaCha8Rng) -> ForkLayerNodes {
        ForkLayerNodes {
            weight: tape.leaf(Matrix::randn(d, 2, 0.5, rng)),
            bias: tape.leaf(Matrix::row(&[0.0, 0.0])),
            embed: tape.leaf(Matrix::randn(1, d, 0.1, rng)),
        }
    }

    // ---- scoring ----------------------------------------------------------

    #[test]
    fn first_layer_fork_hat_equals_log_fork() {
        // all cumulative scores start at ln 1 = 0
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tape = Tape::new();
        let set = fresh_set(&tape, 4, 8, &mut rng);
        let p = fork_params(&tape, 8, &mut rng);
        let s = score_streams(&set, &p).unwrap();
        assert_eq!(s.log_fork_hat.value().data, s.log_fork.value().data);
        assert_eq!(s.log_keep_hat.value().data, s.log_keep.value().data);
    }

    #[test]
    fn zero_affine_output_scores_ln_half() {
        let tape = Tape::new();
        let set = ResidualSet {
            streams: tape.leaf(Matrix::zeros(3, 4)),
            log_cum: tape.leaf(Matrix::zeros(3, 1)),
            meta: (0..3)
                .map(|i| StreamMeta {
                    origin: i,
                    fork_rank: 0,
                })
                .collect(),
        };
        let p = ForkLayerNodes {
            weight: tape.leaf(Matrix::zeros(4, 2)),
            bias: tape.leaf(Matrix::zeros(1, 2)),
            embed: tape.leaf(Matrix::zeros(1, 4)),
        };
        let s = score_streams(&set, &p).unwrap();
        for v in s.log_fork.value().data.iter().chain(&s.log_keep.value().data) {
            assert!((v - 0.5f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn cumulative_update_is_log_product() {
        // log_cum = ln 0.5 and raw fork logit 0 gives fork_hat = ln 0.25
        let tape = Tape::new();
        let meta = [StreamMeta {
            origin: 0,
            fork_rank: 0,
        }];
        let s = ForkScores::synthetic(
            &tape,
            &[0.5f64.ln()],
            &[0.5f64.ln()], // logsigmoid(0)
            &[0.5f64.ln()],
            &meta,
        );
        assert!((s.log_fork_hat.value().data[0] - 0.25f64.ln()).abs() < 1e-15);
        // forced keep overrides the original's keep score to exactly 0
        assert_eq!(s.log_keep_forced[0], 0.0);
    }

    // ---- selection --------------------------------------------------------

    fn meta_originals(n: usize) -> Vec<StreamMeta> {
        (0..n)
            .map(|i| StreamMeta {
                origin: i,
                fork_rank: 0,
            })
            .collect()
    }

    #[test]
    fn saturated_budget_selects_only_forced_keeps() {
        // n = L = kappa at the first forking layer: every fork candidate has a
        // strictly negative score while forced keeps sit at exactly 0
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tape = Tape::new();
        let n = 6;
        let meta = meta_originals(n);
        let lf: Vec<f64> = (0..n).map(|_| -rng.gen_range(0.01..3.0)).collect();
        let lk: Vec<f64> = (0..n).map(|_| -rng.gen_range(0.01..3.0)).collect();
        let s = ForkScores::synthetic(&tape, &vec![0.0; n], &lf, &lk, &meta);
        let sel = select_topk(&s, n, &meta).unwrap();
        assert!(sel.keep.iter().all(|&b| b));
        assert!(sel.fork.iter().all(|&b| !b));
    }

    #[test]
    fn double_budget_selects_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tape = Tape::new();
        let n = 5;
        let meta = meta_originals(n);
        let lf: Vec<f64> = (0..n).map(|_| -rng.gen_range(0.01..3.0)).collect();
        let lk: Vec<f64> = (0..n).map(|_| -rng.gen_range(0.01..3.0)).collect();
        let s = ForkScores::synthetic(&tape, &vec![0.0; n], &lf, &lk, &meta);
        let sel = select_topk(&s, 2 * n, &meta).unwrap();
        assert!(sel.keep.iter().all(|&b| b));
        assert!(sel.fork.iter().all(|&b| b));
    }

    #[test]
    fn budget_below_originals_errors() {
        let tape = Tape::new();
        let meta = meta_originals(4);
        let s = ForkScores::synthetic(&tape, &[0.0; 4], &[-1.0; 4], &[-1.0; 4], &meta);
        assert!(matches!(
            select_topk(&s, 3, &meta),
            Err(Error::Budget { .. })
        ));
    }

    /// Random (sometimes quantized, so exact ties occur) score sets with mixed
    /// fork ranks must match the full-sort oracle exactly.
    #[test]
    fn thousand_random_selections_match_bruteforce() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for case in 0..1000 {
            let n_tokens = rng.gen_range(1..=6);
            // build a plausible meta layout: each token 1..=2 streams
            let mut meta = Vec::new();
            for t in 0..n_tokens {
                let extra = rng.gen_range(0..=1);
                for rank in (0..=extra).rev() {
                    meta.push(StreamMeta {
                        origin: t,
                        fork_rank: rank,
                    });
                }
            }
            let n = meta.len().min(12);
            meta.truncate(n);
            // re-rank the tail group in case truncation cut it
            if let Some(last) = meta.last().copied() {
                if last.fork_rank != 0 {
                    let start = meta.iter().position(|m| m.origin == last.origin).unwrap();
                    let glen = n - start;
                    for (k, m) in meta[start..].iter_mut().enumerate() {
                        m.fork_rank = glen - 1 - k;
                    }
                }
            }
            let originals = meta.iter().filter(|m| m.is_original()).count();
            let quantize = case % 2 == 0;
            let draw = |rng: &mut ChaCha8Rng| -> f64 {
                let v: f64 = -rng.gen_range(0.0001..2.0);
                if quantize {
                    (v * 4.0).round() / 4.0 - 0.001
                } else {
                    v
                }
            };
            let log_cum: Vec<f64> = meta
                .iter()
                .map(|m| if m.is_original() { 0.0 } else { draw(&mut rng) })
                .collect();
            let lf: Vec<f64> = (0..n).map(|_| draw(&mut rng)).collect();
            let lk: Vec<f64> = (0..n).map(|_| draw(&mut rng)).collect();
            let tape = Tape::new();
            let s = ForkScores::synthetic(&tape, &log_cum, &lf, &lk, &meta);
            let kappa = rng.gen_range(originals..=20.min(2 * n + 2));
            let got = select_topk(&s, kappa, &meta).unwrap();
            let want = bruteforce::select_topk(&s, kappa, &meta).unwrap();
            assert_eq!(got, want, "case {case}: n={n} kappa={kappa}");
            // forced keeps always survive
            for (r, m) in meta.iter().enumerate() {
                if m.is_original() {
                    assert!(got.keep[r], "case {case}: original {r} dropped");
                }
            }
            assert_eq!(got.n_selected(), kappa.min(2 * n));
        }
    }

    // ---- assembly ---------------------------------------------------------

    #[test]
    fn all_keeps_no_forks_decays_log_cum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tape = Tape::new();
        let set = fresh_set(&tape, 4, 8, &mut rng);
        let meta = set.meta.clone();
        let lf = vec![-5.0; 4];
        let lk: Vec<f64> = (0..4).map(|_| -rng.gen_range(0.1..1.0)).collect();
        let s = ForkScores::synthetic(&tape, &[0.0; 4], &lf, &lk, &meta);
        let sel = SelectionSet {
            keep: vec![true; 4],
            fork: vec![false; 4],
        };
        let embed = tape.leaf(Matrix::zeros(1, 8));
        let ForkOutcome {
            set: next, events, ..
        } = assemble(&set, &s, &sel, &embed, 1).unwrap();
        assert_eq!(next.meta, meta);
        assert_eq!(next.streams.value().data, set.streams.value().data);
        // log_cum strictly decreases: the keep log-score is always < 0
        for (r, v) in next.log_cum.value().data.iter().enumerate() {
            assert!(*v < 0.0, "row {r} did not decay");
            assert!((*v - lk[r]).abs() < 1e-15);
        }
        assert_eq!(events.len(), 4);
        assert!(events.iter().all(|e| e.action == Action::Keep));
    }

    #[test]
    fn fork_inserts_left_of_parent_with_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let tape = Tape::new();
        let set = fresh_set(&tape, 3, 4, &mut rng);
        let meta = set.meta.clone();
        let s = ForkScores::synthetic(
            &tape,
            &[0.0; 3],
            &[-0.3, -0.4, -0.5],
            &[-0.1, -0.2, -0.3],
            &meta,
        );
        let sel = SelectionSet {
            keep: vec![true; 3],
            fork: vec![false, true, false],
        };
        let embed = tape.leaf(Matrix::randn(1, 4, 1.0, &mut rng));
        let ForkOutcome { set: next, .. } = assemble(&set, &s, &sel, &embed, 2).unwrap();
        // layout: [x0,0][x1,1][x1,0][x2,0]
        let want_meta = vec![
            StreamMeta { origin: 0, fork_rank: 0 },
            StreamMeta { origin: 1, fork_rank: 1 },
            StreamMeta { origin: 1, fork_rank: 0 },
            StreamMeta { origin: 2, fork_rank: 0 },
        ];
        assert_eq!(next.meta, want_meta);
        let old = set.streams.value();
        let new = next.streams.value();
        let ev = embed.value();
        for j in 0..4 {
            assert!((new.at(1, j) - (old.at(1, j) + ev.data[j])).abs() < 1e-15);
            assert_eq!(new.at(2, j), old.at(1, j));
        }
        // fork inherits the fork-hat score, kept parent the unforced keep-hat
        let lc = next.log_cum.value();
        assert!((lc.data[1] - -0.4).abs() < 1e-15);
        assert!((lc.data[2] - -0.2).abs() < 1e-15);
        next.validate(8).unwrap();
    }

    /// Hand trace of a token with two existing forks where one fork's keep
    /// loses the top-k: that row is removed and survivor order is preserved.
    #[test]
    fn losing_fork_is_deleted_order_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let tape = Tape::new();
        // 3 tokens; token 1 has two forks: rows [t0,0][t1,2][t1,1][t1,0][t2,0]
        let meta = vec![
            StreamMeta { origin: 0, fork_rank: 0 },
            StreamMeta { origin: 1, fork_rank: 2 },
            StreamMeta { origin: 1, fork_rank: 1 },
            StreamMeta { origin: 1, fork_rank: 0 },
            StreamMeta { origin: 2, fork_rank: 0 },
        ];
        let set = ResidualSet {
            streams: tape.leaf(Matrix::randn(5, 4, 1.0, &mut rng)),
            log_cum: tape.leaf(Matrix::col(&[0.0, -0.5, -0.4, 0.0, 0.0])),
            meta: meta.clone(),
        };
        // keep scores: row 2 (the rank-1 fork) gets a terrible score
        let lk = [-0.1, -0.2, -8.0, -0.1, -0.1];
        let lf = [-9.0, -9.0, -9.0, -9.0, -9.0];
        let s = ForkScores::synthetic(
            &tape,
            &[0.0, -0.5, -0.4, 0.0, 0.0],
            &lf,
            &lk,
            &meta,
        );
        // budget 4: three forced keeps + the better surviving fork
        let sel = select_topk(&s, 4, &meta).unwrap();
        assert!(!sel.keep[2], "low-scoring fork must be dropped");
        let embed = tape.leaf(Matrix::zeros(1, 4));
        let ForkOutcome {
            set: next, events, ..
        } = assemble(&set, &s, &sel, &embed, 3).unwrap();
        let want_meta = vec![
            StreamMeta { origin: 0, fork_rank: 0 },
            StreamMeta { origin: 1, fork_rank: 1 },
            StreamMeta { origin: 1, fork_rank: 0 },
            StreamMeta { origin: 2, fork_rank: 0 },
        ];
        assert_eq!(next.meta, want_meta);
        // survivors keep their values in order: old rows 0,1,3,4
        let old = set.streams.value();
        let new = next.streams.value();
        for (new_r, old_r) in [(0usize, 0usize), (1, 1), (2, 3), (3, 4)] {
            assert_eq!(new.row_slice(new_r), old.row_slice(old_r));
        }
        assert_eq!(
            events.iter().filter(|e| e.action == Action::Delete).count(),
            1
        );
        next.validate(4).unwrap();
    }

    /// score -> select -> assemble against the value-level oracle on random
    /// inputs, including monotone decay and conservation of originals.
    #[test]
    fn full_step_matches_value_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for case in 0..200 {
            let n_tokens = rng.gen_range(2..=5);
            let d = 6;
            let tape = Tape::new();
            let mut set = fresh_set(&tape, n_tokens, d, &mut rng);
            let kappa = rng.gen_range(n_tokens..=2 * n_tokens + 3);
            let p = fork_params(&tape, d, &mut rng);
            // run two chained fork steps to exercise non-trivial meta
            for layer in 1..=2 {
                let scores = score_streams(&set, &p).unwrap();
                let sel = select_topk(&scores, kappa, &set.meta).unwrap();
                let want_sel = bruteforce::select_topk(&scores, kappa, &set.meta).unwrap();
                assert_eq!(sel, want_sel, "case {case} layer {layer}");
                let plain = bruteforce::assemble(
                    &set.meta,
                    &sel,
                    &scores.log_fork_hat.value().data,
                    &scores.log_keep_hat.value().data,
                );
                let before = set.log_cum.value().data;
                let before_meta = set.meta.clone();
                let outcome = assemble(&set, &scores, &sel, &p.embed, layer).unwrap();
                let next = outcome.set;
                assert_eq!(next.meta, plain.meta, "case {case} layer {layer}");
                assert_eq!(next.log_cum.value().data, plain.log_cum);
                // monotone decay for surviving streams
                for (new_r, &src) in plain.src_rows.iter().enumerate() {
                    assert!(
                        next.log_cum.value().data[new_r] <= before[src],
                        "case {case}: log_cum grew"
                    );
                }
                // conservation of originals
                let originals: Vec<usize> = next
                    .meta
                    .iter()
                    .filter(|m| m.is_original())
                    .map(|m| m.origin)
                    .collect();
                assert_eq!(originals, (0..n_tokens).collect::<Vec<_>>());
                assert!(next.n_alive() <= kappa);
                if 2 * before_meta.len() >= kappa {
                    assert_eq!(next.n_alive(), kappa, "budget must saturate");
                }
                next.validate(kappa).unwrap();
                set = next;
            }
        }
    }

    #[test]
    fn gradient_reaches_decision_weights_through_attenuation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let tape = Tape::new();
        let set = fresh_set(&tape, 3, 6, &mut rng);
        let p = fork_params(&tape, 6, &mut rng);
        let ForkOutcome {
            set: next, events, ..
        } = fork_step(&set, &p, 6, 1).unwrap();
        assert!(
            events.iter().any(|e| e.action == Action::Fork),
            "expected at least one fork with room in the budget"
        );
        // attenuation-style use of the scores: streams scaled by p_cum
        let out = next
            .streams
            .scale_rows_by(&next.log_cum.exp())
            .sum_all();
        tape.backward(&out);
        let gw = p.weight.grad();
        assert!(gw.data.iter().any(|&v| v != 0.0), "no gradient in weight");
        let gb = p.bias.grad();
        assert!(gb.data.iter().any(|&v| v != 0.0), "no gradient in bias");
        let ge = p.embed.grad();
        assert!(ge.data.iter().any(|&v| v != 0.0), "no gradient in embed");
    }
}
