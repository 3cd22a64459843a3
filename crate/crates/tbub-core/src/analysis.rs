//! Offline analyses over exported trace files: entropy-vs-fork curves,
//! parent/child attention allocation, per-layer fork-location maps, and the
//! overforking ablation harness. Each figure is a pure function of trace
//! records, so re-running an analysis on a saved trace is bit-identical.

use crate::error::{Error, Result};
use crate::forking::StreamMeta;
use crate::infer::{BudgetMode, BudgetPolicy};
use crate::model::{entropies, ForwardOpts, Model};
use crate::trace::{Action, TraceRecord};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

/// Default token window for entropy aggregation.
pub const ENTROPY_WINDOW: usize = 4;
/// Smallest corpus sample the entropy figure accepts at the tool level.
pub const MIN_SAMPLE_TOKENS: usize = 10_000;
const ENTROPY_BUCKETS: usize = 20;
const MIN_WINDOWS_PER_BUCKET: usize = 30;

/// Run consecutive non-overlapping blocks of a token stream through the
/// model, emitting the per-block records every analysis consumes: fork
/// events, per-token entropy and final fork counts, and (optionally) stream
/// layouts plus raw attention rows for layers that hold forked groups.
pub fn run_corpus_trace(
    model: &Model,
    tokens: &[usize],
    max_blocks: usize,
    probe_attention: bool,
) -> Result<Vec<TraceRecord>> {
    let block = model.cfg.block_size;
    let mut records = Vec::new();
    let mut emitted = 0usize;
    for (index, chunk) in tokens.chunks(block).enumerate() {
        if emitted >= max_blocks || chunk.len() < block {
            break;
        }
        records.push(TraceRecord::Block { index });
        let fw = model.forward(
            chunk,
            None,
            ForwardOpts {
                probe_attention,
            },
        )?;
        for ev in &fw.trace.fork_events {
            records.push(TraceRecord::ForkEvent(ev.clone()));
        }
        for probe in &fw.trace.attn {
            // export only layers where some token actually holds a fork
            if probe.meta.iter().all(StreamMeta::is_original) {
                continue;
            }
            records.push(TraceRecord::Streams {
                layer: probe.layer,
                origins: probe.meta.iter().map(|m| m.origin).collect(),
                ranks: probe.meta.iter().map(|m| m.fork_rank).collect(),
            });
            for (head, w) in probe.heads.iter().enumerate() {
                for q in 0..w.rows {
                    records.push(TraceRecord::AttnRow {
                        layer: probe.layer,
                        head,
                        query: q,
                        weights: w.row_slice(q).to_vec(),
                    });
                }
            }
        }
        let ld = fw.log_dists.value();
        let ent = entropies(&ld);
        let forks = fw.trace.final_forks_per_token(chunk.len());
        for (position, (&h, &f)) in ent.iter().zip(&forks).enumerate() {
            records.push(TraceRecord::Token {
                position,
                entropy: h,
                final_forks: f,
            });
        }
        emitted += 1;
    }
    Ok(records)
}

/// One aggregated window: mean entropy over w tokens and that window's
/// total final-layer forks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowPoint {
    pub mean_entropy: f64,
    pub forks: f64,
    pub norm_forks: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BucketRow {
    pub lo: f64,
    pub hi: f64,
    pub mean_entropy: f64,
    pub mean_norm_forks: f64,
    pub windows: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntropyForkCurve {
    pub points: Vec<WindowPoint>,
    pub buckets: Vec<BucketRow>,
}

fn token_stream(records: &[TraceRecord]) -> Vec<(f64, usize)> {
    records
        .iter()
        .filter_map(|r| match r {
            TraceRecord::Token {
                entropy,
                final_forks,
                ..
            } => Some((*entropy, *final_forks)),
            _ => None,
        })
        .collect()
}

/// Windowed entropy-vs-fork curve from trace records. When surrogate records
/// are given, entropies come from them (positionally aligned) while fork
/// counts stay with the forking model's records. Fork counts are normalized
/// to [0,1] by the maximum window count of the run.
pub fn entropy_fork_curve(
    records: &[TraceRecord],
    surrogate: Option<&[TraceRecord]>,
    window: usize,
) -> Result<EntropyForkCurve> {
    let base = token_stream(records);
    let ent_source = match surrogate {
        Some(s) => {
            let sur = token_stream(s);
            if sur.len() != base.len() {
                return Err(Error::Arg(format!(
                    "surrogate trace holds {} tokens, forking trace {}",
                    sur.len(),
                    base.len()
                )));
            }
            sur
        }
        None => base.clone(),
    };
    if base.is_empty() {
        return Err(Error::Arg("trace contains no token records".into()));
    }
    let mut points = Vec::new();
    let mut i = 0;
    while i + window <= base.len() {
        let mean_entropy = ent_source[i..i + window]
            .iter()
            .map(|(h, _)| h)
            .sum::<f64>()
            / window as f64;
        let forks = base[i..i + window]
            .iter()
            .map(|(_, f)| *f as f64)
            .sum::<f64>();
        points.push(WindowPoint {
            mean_entropy,
            forks,
            norm_forks: 0.0,
        });
        i += window;
    }
    let max_forks = points.iter().map(|p| p.forks).fold(0.0, f64::max);
    for p in &mut points {
        p.norm_forks = if max_forks > 0.0 {
            p.forks / max_forks
        } else {
            0.0
        };
    }
    // equal-width entropy buckets; keep only well-populated ones
    let lo = points
        .iter()
        .map(|p| p.mean_entropy)
        .fold(f64::INFINITY, f64::min);
    let hi = points
        .iter()
        .map(|p| p.mean_entropy)
        .fold(f64::NEG_INFINITY, f64::max);
    let width = ((hi - lo) / ENTROPY_BUCKETS as f64).max(f64::MIN_POSITIVE);
    let mut buckets: Vec<(f64, f64, usize)> = vec![(0.0, 0.0, 0); ENTROPY_BUCKETS];
    for p in &points {
        let b = (((p.mean_entropy - lo) / width) as usize).min(ENTROPY_BUCKETS - 1);
        buckets[b].0 += p.mean_entropy;
        buckets[b].1 += p.norm_forks;
        buckets[b].2 += 1;
    }
    let buckets = buckets
        .into_iter()
        .enumerate()
        .filter(|(_, (_, _, n))| *n >= MIN_WINDOWS_PER_BUCKET)
        .map(|(i, (se, sf, n))| BucketRow {
            lo: lo + i as f64 * width,
            hi: lo + (i + 1) as f64 * width,
            mean_entropy: se / n as f64,
            mean_norm_forks: sf / n as f64,
            windows: n,
        })
        .collect();
    Ok(EntropyForkCurve { points, buckets })
}

/// Number of distinct entropy buckets the windows fall into (before the
/// population filter).
pub fn occupied_buckets(curve: &EntropyForkCurve) -> usize {
    let lo = curve
        .points
        .iter()
        .map(|p| p.mean_entropy)
        .fold(f64::INFINITY, f64::min);
    let hi = curve
        .points
        .iter()
        .map(|p| p.mean_entropy)
        .fold(f64::NEG_INFINITY, f64::max);
    let width = ((hi - lo) / ENTROPY_BUCKETS as f64).max(f64::MIN_POSITIVE);
    let mut seen = std::collections::BTreeSet::new();
    for p in &curve.points {
        seen.insert((((p.mean_entropy - lo) / width) as usize).min(ENTROPY_BUCKETS - 1));
    }
    seen.len()
}

pub fn curve_csv(curve: &EntropyForkCurve) -> String {
    let mut s = String::from("bucket_lo,bucket_hi,mean_entropy,mean_norm_forks,windows\n");
    for b in &curve.buckets {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            b.lo, b.hi, b.mean_entropy, b.mean_norm_forks, b.windows
        );
    }
    s
}

/// Mean attention weight received, split by the relationship between query
/// and key streams. Only causally allowed pairs enter the means;
/// child->parent is reported separately because the mask forces it to zero.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttentionCategories {
    pub sums: BTreeMap<&'static str, (f64, usize)>,
}

pub const ATTN_CATEGORIES: [&str; 6] = [
    "og_to_child",
    "og_to_self",
    "og_to_other",
    "child_to_child",
    "child_to_self",
    "child_to_parent",
];

impl AttentionCategories {
    fn add(&mut self, cat: &'static str, w: f64) {
        let e = self.sums.entry(cat).or_insert((0.0, 0));
        e.0 += w;
        e.1 += 1;
    }

    pub fn mean(&self, cat: &str) -> Option<f64> {
        self.sums
            .get(cat)
            .filter(|(_, n)| *n > 0)
            .map(|(s, n)| s / *n as f64)
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("category,mean_weight,pairs\n");
        for cat in ATTN_CATEGORIES {
            let (sum, n) = self.sums.get(cat).copied().unwrap_or((0.0, 0));
            let mean = if n > 0 { sum / n as f64 } else { f64::NAN };
            let _ = writeln!(s, "{cat},{mean},{n}");
        }
        s
    }
}

/// Categorize raw exported attention rows by stream relationship.
pub fn parent_child_attention(records: &[TraceRecord]) -> Result<AttentionCategories> {
    let mut cats = AttentionCategories::default();
    let mut layout: BTreeMap<usize, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for rec in records {
        match rec {
            TraceRecord::Block { .. } => layout.clear(),
            TraceRecord::Streams {
                layer,
                origins,
                ranks,
            } => {
                layout.insert(*layer, (origins.clone(), ranks.clone()));
            }
            TraceRecord::AttnRow {
                layer,
                query,
                weights,
                ..
            } => {
                let (origins, ranks) = layout.get(layer).ok_or_else(|| {
                    Error::Format(format!("attention row before stream layout at layer {layer}"))
                })?;
                let q = *query;
                if weights.len() != origins.len() {
                    return Err(Error::Format("attention row width mismatch".into()));
                }
                for (k, &w) in weights.iter().enumerate() {
                    let same_origin = origins[k] == origins[q];
                    let q_og = ranks[q] == 0;
                    let k_og = ranks[k] == 0;
                    if k > q {
                        // future keys: only the structural child->parent zero
                        // is interesting to report
                        if same_origin && !q_og && k_og {
                            cats.add("child_to_parent", w);
                        }
                        continue;
                    }
                    let cat = if k == q {
                        if q_og {
                            "og_to_self"
                        } else {
                            "child_to_self"
                        }
                    } else if q_og && same_origin && !k_og {
                        "og_to_child"
                    } else if q_og {
                        "og_to_other"
                    } else if same_origin && !k_og {
                        "child_to_child"
                    } else {
                        continue;
                    };
                    cats.add(cat, w);
                }
            }
            _ => {}
        }
    }
    Ok(cats)
}

/// Forks created per (forking layer, input token).
#[derive(Debug, Clone, PartialEq)]
pub struct ForkMap {
    pub layers: Vec<usize>,
    pub tokens: usize,
    /// counts[layer_index][token].
    pub counts: Vec<Vec<usize>>,
}

impl ForkMap {
    pub fn csv(&self) -> String {
        let mut s = String::from("layer");
        for t in 0..self.tokens {
            let _ = write!(s, ",t{t}");
        }
        s.push('\n');
        for (l, row) in self.layers.iter().zip(&self.counts) {
            let _ = write!(s, "{l}");
            for c in row {
                let _ = write!(s, ",{c}");
            }
            s.push('\n');
        }
        s
    }
}

/// Fork counts aggregated from trace fork events for one forward pass
/// (or summed across blocks for multi-block traces).
pub fn fork_location_map(records: &[TraceRecord], fork_layers: &[usize], tokens: usize) -> ForkMap {
    let mut counts = vec![vec![0usize; tokens]; fork_layers.len()];
    for rec in records {
        if let TraceRecord::ForkEvent(ev) = rec {
            if ev.action == Action::Fork {
                if let Some(li) = fork_layers.iter().position(|&l| l == ev.layer) {
                    if ev.token_index < tokens {
                        counts[li][ev.token_index] += 1;
                    }
                }
            }
        }
    }
    ForkMap {
        layers: fork_layers.to_vec(),
        tokens,
        counts,
    }
}

/// Mean fork count over a set of positions vs. the rest.
pub fn span_fork_contrast(map: &ForkMap, span_positions: &[usize]) -> (f64, f64) {
    let in_span: Vec<bool> = (0..map.tokens)
        .map(|t| span_positions.contains(&t))
        .collect();
    let mut span_sum = 0.0;
    let mut span_n = 0usize;
    let mut fill_sum = 0.0;
    let mut fill_n = 0usize;
    for row in &map.counts {
        for (t, &c) in row.iter().enumerate() {
            if in_span[t] {
                span_sum += c as f64;
                span_n += 1;
            } else {
                fill_sum += c as f64;
                fill_n += 1;
            }
        }
    }
    (
        if span_n > 0 { span_sum / span_n as f64 } else { 0.0 },
        if fill_n > 0 { fill_sum / fill_n as f64 } else { 0.0 },
    )
}

/// Paired-training report for the fork-layer placement ablation.
#[derive(Debug, Clone)]
pub struct AblationReport {
    pub early_layers: Vec<usize>,
    pub extended_layers: Vec<usize>,
    pub early_val_ppl: f64,
    pub extended_val_ppl: f64,
    /// Mean forks per layer on the evaluation sample, per arm.
    pub early_utilization: BTreeMap<usize, f64>,
    pub extended_utilization: BTreeMap<usize, f64>,
}

/// Extend the configured forking pattern deeper into the network with the
/// same stride (e.g. [2,4] in 6 layers extends to [2,4,6]).
pub fn extend_fork_layers(fork_layers: &[usize], n_layers: usize) -> Vec<usize> {
    let mut out = fork_layers.to_vec();
    if out.is_empty() {
        return out;
    }
    let stride = if out.len() >= 2 {
        out[out.len() - 1] - out[out.len() - 2]
    } else {
        out[0].max(1)
    };
    let mut next = out[out.len() - 1] + stride;
    while next <= n_layers {
        out.push(next);
        next += stride;
    }
    out
}

/// Train two models differing only in fork-layer placement and report their
/// validation perplexities and per-layer fork utilization. The harness
/// reproduces the experiment shape; no particular ordering is asserted.
pub fn overfork_ablation(
    base_cfg: &crate::model::ModelConfig,
    train_cfg: &crate::train::TrainConfig,
    store: &crate::data::TokenStore,
    val_tokens: &[usize],
    out_dir: &Path,
) -> Result<AblationReport> {
    let extended_layers = extend_fork_layers(&base_cfg.fork_layers, base_cfg.n_layers);
    let mut report = AblationReport {
        early_layers: base_cfg.fork_layers.clone(),
        extended_layers: extended_layers.clone(),
        early_val_ppl: f64::NAN,
        extended_val_ppl: f64::NAN,
        early_utilization: BTreeMap::new(),
        extended_utilization: BTreeMap::new(),
    };
    for (arm, layers) in [
        ("early", base_cfg.fork_layers.clone()),
        ("extended", extended_layers),
    ] {
        let mut cfg = base_cfg.clone();
        cfg.fork_layers = layers;
        let mut model = Model::init(cfg)?;
        let arm_dir = out_dir.join(arm);
        crate::train::train(
            &mut model,
            store,
            None,
            train_cfg,
            &arm_dir,
            None,
            &BTreeMap::new(),
        )?;
        let policy = BudgetPolicy::new(BudgetMode::Dynamic, &model);
        let score = crate::infer::score_sequence(&model, val_tokens, &policy)?;
        let mut util: BTreeMap<usize, f64> = BTreeMap::new();
        let mut blocks = 0usize;
        for t in &score.traces {
            blocks += 1;
            for ev in &t.fork_events {
                if ev.action == Action::Fork {
                    *util.entry(ev.layer).or_insert(0.0) += 1.0;
                }
            }
        }
        for v in util.values_mut() {
            *v /= blocks.max(1) as f64;
        }
        match arm {
            "early" => {
                report.early_val_ppl = score.perplexity;
                report.early_utilization = util;
            }
            _ => {
                report.extended_val_ppl = score.perplexity;
                report.extended_utilization = util;
            }
        }
    }
    Ok(report)
}

// ---- SVG rendering ---------------------------------------------------------

const SVG_W: f64 = 640.0;
const SVG_H: f64 = 480.0;
const MARGIN: f64 = 48.0;

fn svg_open(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_W}\" height=\"{SVG_H}\" \
         viewBox=\"0 0 {SVG_W} {SVG_H}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-family=\"sans-serif\" \
         font-size=\"14\">{title}</text>\n",
        SVG_W / 2.0
    )
}

/// Scatter plot of (entropy, normalized forks) windows plus bucket means.
pub fn curve_svg(curve: &EntropyForkCurve, title: &str) -> String {
    let xs: Vec<f64> = curve.points.iter().map(|p| p.mean_entropy).collect();
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-9);
    let px = |x: f64| MARGIN + (x - lo) / span * (SVG_W - 2.0 * MARGIN);
    let py = |y: f64| SVG_H - MARGIN - y * (SVG_H - 2.0 * MARGIN);
    let mut s = svg_open(title);
    for p in &curve.points {
        let _ = writeln!(
            s,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2\" fill=\"steelblue\" fill-opacity=\"0.35\"/>",
            px(p.mean_entropy),
            py(p.norm_forks)
        );
    }
    for b in &curve.buckets {
        let _ = writeln!(
            s,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"5\" fill=\"crimson\"/>",
            px(b.mean_entropy),
            py(b.mean_norm_forks)
        );
    }
    let _ = writeln!(
        s,
        "<line x1=\"{MARGIN}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\
         \n<line x1=\"{MARGIN}\" y1=\"{MARGIN}\" x2=\"{MARGIN}\" y2=\"{}\" stroke=\"black\"/>",
        SVG_H - MARGIN,
        SVG_W - MARGIN,
        SVG_H - MARGIN,
        SVG_H - MARGIN
    );
    s.push_str("</svg>\n");
    s
}

/// Heat map of fork counts: forking layers as rows, tokens as columns.
pub fn forkmap_svg(map: &ForkMap, title: &str) -> String {
    let mut s = svg_open(title);
    let max = map
        .counts
        .iter()
        .flatten()
        .copied()
        .max()
        .unwrap_or(0)
        .max(1) as f64;
    let cw = (SVG_W - 2.0 * MARGIN) / map.tokens.max(1) as f64;
    let ch = (SVG_H - 2.0 * MARGIN) / map.layers.len().max(1) as f64;
    for (r, row) in map.counts.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            let heat = (255.0 * (1.0 - v as f64 / max)) as u8;
            let _ = writeln!(
                s,
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" \
                 fill=\"rgb(255,{heat},{heat})\"/>",
                MARGIN + c as f64 * cw,
                MARGIN + r as f64 * ch,
                cw,
                ch
            );
        }
        let _ = writeln!(
            s,
            "<text x=\"8\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"11\">L{}</text>",
            MARGIN + r as f64 * ch + ch / 2.0,
            map.layers[r]
        );
    }
    s.push_str("</svg>\n");
    s
}
