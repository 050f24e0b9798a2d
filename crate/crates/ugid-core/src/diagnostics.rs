//! Mechanistic verification: spectral divergence, hidden drift, pronoun
//! bias ratios, layer-wise logit lens, activation patching, and per-token
//! spectral signature differences.
//!
//! Everything here is read-only over model parameters and consumes plain
//! value traces; nothing touches a gradient tape.

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

use crate::data::{AnchorPrompt, Corpus};
use crate::graph_loss::{laplacian_eigenvalues, GraphLossError};
use crate::model::{Model, ModelError, PatchSpec, Trace};
use crate::stability_loss::PronounPair;
use crate::TokenId;

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("empty template list")]
    EmptyTemplates,
    #[error("empty anchor list")]
    EmptyAnchors,
    #[error("patch inputs differ in length ({x} vs {xp})")]
    LengthMismatch { x: usize, xp: usize },
    #[error("layer {layer} out of range ({layers} layers)")]
    LayerOutOfRange { layer: usize, layers: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    GraphLoss(#[from] GraphLossError),
}

/// Which spectrum backs the divergence metrics. The losses always use the
/// diagonal eigenvalues; the singular-value mode exists as an alternative
/// reading of the spectrum for diagnostics only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpectralMode {
    Eigenvalue,
    SingularValue,
}

fn check_layer(trace: &Trace, layer: usize) -> Result<(), DiagnosticsError> {
    if layer >= trace.attn.len() {
        return Err(DiagnosticsError::LayerOutOfRange { layer, layers: trace.attn.len() });
    }
    Ok(())
}

/// L2 distance between the spectral signatures of one `(layer, head)` in a
/// counterfactual trace pair, position-aligned with the sink position
/// excluded.
pub fn delta_spec(
    trace_x: &Trace,
    trace_xp: &Trace,
    layer: usize,
    head: usize,
) -> Result<f64, DiagnosticsError> {
    delta_spec_with_mode(trace_x, trace_xp, layer, head, SpectralMode::Eigenvalue)
}

pub fn delta_spec_with_mode(
    trace_x: &Trace,
    trace_xp: &Trace,
    layer: usize,
    head: usize,
    mode: SpectralMode,
) -> Result<f64, DiagnosticsError> {
    check_layer(trace_x, layer)?;
    let ax = &trace_x.attn[layer][head];
    let axp = &trace_xp.attn[layer][head];
    match mode {
        SpectralMode::Eigenvalue => {
            let lx = laplacian_eigenvalues(ax)?;
            let lxp = laplacian_eigenvalues(axp)?;
            Ok(lx
                .iter()
                .zip(&lxp)
                .skip(1)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt())
        }
        SpectralMode::SingularValue => {
            let sx = laplacian_singular_values(ax)?;
            let sxp = laplacian_singular_values(axp)?;
            Ok(sx
                .iter()
                .zip(&sxp)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt())
        }
    }
}

/// Sorted singular values of the sink-excluded Laplacian, via a Jacobi
/// eigensolve of `LᵀL`.
fn laplacian_singular_values(attn: &crate::Tensor) -> Result<Vec<f64>, DiagnosticsError> {
    let lam_check = laplacian_eigenvalues(attn)?; // validates causality
    let _ = lam_check;
    let t = attn.rows();
    if t <= 1 {
        return Ok(vec![]);
    }
    // Full Laplacian, then drop the sink row and column.
    let mut col_sums = vec![0.0; t];
    for q in 0..t {
        for c in 0..t {
            col_sums[c] += attn.at(q, c);
        }
    }
    let n = t - 1;
    let mut l = vec![0.0; n * n];
    for i in 1..t {
        for j in 1..t {
            let d = if i == j { col_sums[i] / t as f64 } else { 0.0 };
            l[(i - 1) * n + (j - 1)] = d - attn.at(i, j);
        }
    }
    // Gram matrix LᵀL is symmetric positive semidefinite.
    let mut gram = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for k in 0..n {
                s += l[k * n + i] * l[k * n + j];
            }
            gram[i * n + j] = s;
        }
    }
    let mut eig = jacobi_symmetric_eigenvalues(gram, n);
    eig.sort_by(|a, b| b.partial_cmp(a).unwrap());
    Ok(eig.into_iter().map(|e| e.max(0.0).sqrt()).collect())
}

/// Cyclic Jacobi eigenvalue iteration for a symmetric matrix.
fn jacobi_symmetric_eigenvalues(mut a: Vec<f64>, n: usize) -> Vec<f64> {
    for _sweep in 0..60 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[p * n + q] * a[p * n + q];
            }
        }
        if off < 1e-28 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = 0.5 * (a[q * n + q] - a[p * n + p]) / apq;
                let sign = if theta >= 0.0 { 1.0 } else { -1.0 };
                let tan = sign / (theta.abs() + (theta * theta + 1.0).sqrt());
                let cos = 1.0 / (tan * tan + 1.0).sqrt();
                let sin = tan * cos;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = cos * akp - sin * akq;
                    a[k * n + q] = sin * akp + cos * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = cos * apk - sin * aqk;
                    a[q * n + k] = sin * apk + cos * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i * n + i]).collect()
}

/// Mean token-wise L2 drift of one layer's hidden states, all positions.
pub fn hidden_drift(
    trace_x: &Trace,
    trace_xp: &Trace,
    layer: usize,
) -> Result<f64, DiagnosticsError> {
    check_layer(trace_x, layer)?;
    let hx = &trace_x.hidden[layer];
    let hxp = &trace_xp.hidden[layer];
    let (t, d) = (hx.rows(), hx.cols());
    let mut total = 0.0;
    for row in 0..t {
        let mut sq = 0.0;
        for c in 0..d {
            let diff = hx.at(row, c) - hxp.at(row, c);
            sq += diff * diff;
        }
        total += sq.sqrt();
    }
    Ok(total / t as f64)
}

/// Hidden drift averaged over the reported target layers.
pub fn delta_hidden(
    trace_x: &Trace,
    trace_xp: &Trace,
    target_layers: &BTreeSet<usize>,
) -> Result<f64, DiagnosticsError> {
    let mut total = 0.0;
    for &layer in target_layers {
        total += hidden_drift(trace_x, trace_xp, layer)?;
    }
    Ok(total / target_layers.len() as f64)
}

/// Per-template pronoun ratio `max(r, 1/r)` with `r = P(male)/P(female)`,
/// returned as `(mean, max)` over the templates. 1.0 is perfect neutrality.
pub fn bias_ratio_eval(
    model: &Model,
    templates: &[Vec<TokenId>],
    pair: PronounPair,
) -> Result<(f64, f64), DiagnosticsError> {
    if templates.is_empty() {
        return Err(DiagnosticsError::EmptyTemplates);
    }
    let mut sum = 0.0;
    let mut max: f64 = 0.0;
    for prompt in templates {
        let dist = model.next_token_distribution(prompt)?;
        let r = dist[pair.male] / dist[pair.female];
        let bias = r.max(1.0 / r);
        sum += bias;
        max = max.max(bias);
    }
    Ok((sum / templates.len() as f64, max))
}

/// Logit-lens gap per layer: project each layer's final-position hidden
/// state through the final norm and unembedding, and read
/// `logit(male) − logit(female)`.
pub fn logit_lens_gap(
    model: &Model,
    prompt: &[TokenId],
    pair: PronounPair,
) -> Result<Vec<f64>, DiagnosticsError> {
    let trace = model.forward_with_trace(prompt)?;
    let last = prompt.len() - 1;
    let d = model.config.d_model;
    let mut gaps = Vec::with_capacity(trace.hidden.len());
    for hidden in &trace.hidden {
        let row: Vec<f64> = (0..d).map(|c| hidden.at(last, c)).collect();
        let lens = model.lens_logits(&row);
        gaps.push(lens[pair.male] - lens[pair.female]);
    }
    Ok(gaps)
}

/// Causal tracing: run `x` clean, then rerun with head `(layer, head)`'s
/// output at `position` replaced by the vector from the `xp` run, and
/// report the change in the final-position pronoun logit gap.
#[allow(clippy::too_many_arguments)]
pub fn activation_patch(
    model: &Model,
    x: &[TokenId],
    xp: &[TokenId],
    layer: usize,
    head: usize,
    position: usize,
    pair: PronounPair,
) -> Result<f64, DiagnosticsError> {
    if x.len() != xp.len() {
        return Err(DiagnosticsError::LengthMismatch { x: x.len(), xp: xp.len() });
    }
    let clean = model.forward_with_trace(x)?;
    let gap0 = final_gap(&clean, pair);
    let donor = model.head_output(xp, layer, head)?;
    let values: Vec<f64> = (0..donor.cols()).map(|c| donor.at(position, c)).collect();
    let patched =
        model.forward_with_patch(x, &PatchSpec { layer, head, position, values })?;
    let gap1 = final_gap(&patched, pair);
    Ok(gap1 - gap0)
}

fn final_gap(trace: &Trace, pair: PronounPair) -> f64 {
    let last = trace.logits.rows() - 1;
    trace.logits.at(last, pair.male) - trace.logits.at(last, pair.female)
}

/// Token-wise absolute difference of the head-mean spectral signature at
/// one layer. The sink position is reported as zero.
pub fn spectral_signature_diff(
    trace_x: &Trace,
    trace_xp: &Trace,
    layer: usize,
) -> Result<Vec<f64>, DiagnosticsError> {
    check_layer(trace_x, layer)?;
    let heads = trace_x.attn[layer].len();
    let t = trace_x.attn[layer][0].rows();
    let head_mean = |trace: &Trace| -> Result<Vec<f64>, DiagnosticsError> {
        let mut mean = vec![0.0; t];
        for h in 0..heads {
            let lam = laplacian_eigenvalues(&trace.attn[layer][h])?;
            for (m, l) in mean.iter_mut().zip(&lam) {
                *m += l / heads as f64;
            }
        }
        Ok(mean)
    };
    let mx = head_mean(trace_x)?;
    let mxp = head_mean(trace_xp)?;
    Ok((0..t).map(|i| if i == 0 { 0.0 } else { (mx[i] - mxp[i]).abs() }).collect())
}

/// Definitional-anchor evaluation: accuracy requires the gold pronoun to
/// beat its counterpart strictly; perplexity is over the anchor sentences.
pub fn anchor_eval(
    model: &Model,
    anchors: &[AnchorPrompt],
) -> Result<(f64, f64), DiagnosticsError> {
    if anchors.is_empty() {
        return Err(DiagnosticsError::EmptyAnchors);
    }
    let mut correct = 0usize;
    for anchor in anchors {
        let dist = model.next_token_distribution(&anchor.prompt)?;
        if dist[anchor.gold] > dist[anchor.foil] {
            correct += 1;
        }
    }
    let sentences: Vec<Vec<TokenId>> = anchors.iter().map(|a| a.sentence.clone()).collect();
    let ppl = model.perplexity(&sentences)?;
    Ok((correct as f64 / anchors.len() as f64, ppl))
}

/// Everything the evaluation protocol reports, aggregated over a corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiagnosticReport {
    /// Mean ΔSpec per `[layer][head]` over the target pairs.
    pub delta_spec: Vec<Vec<f64>>,
    /// Mean hidden drift per layer over the target pairs.
    pub delta_hidden: Vec<f64>,
    pub bias_id_mean: f64,
    pub bias_id_max: f64,
    pub bias_ood_mean: f64,
    pub bias_ood_max: f64,
    pub anchor_accuracy: f64,
    pub anchor_perplexity: f64,
    /// Mean signed lens gap per layer over the ID templates.
    pub logit_gap_by_layer: Vec<f64>,
    /// Mean |patch effect| per `[layer][head]`: for each target pair cut at
    /// the pronoun, the counterfactual run's head output at the pronoun
    /// position is patched in and the final-position gap shift recorded.
    pub patch_effects: Vec<Vec<f64>>,
    /// The ratio definition is an interpretation choice, so reports carry it.
    pub bias_ratio_definition: String,
}

/// Run the full protocol against one model.
pub fn full_report(
    model: &Model,
    corpus: &Corpus,
    target_layers: &BTreeSet<usize>,
) -> Result<DiagnosticReport, DiagnosticsError> {
    let layers = model.config.n_layers;
    let heads = model.config.n_heads;
    let pair = corpus.pronouns;

    // Structural divergence is probed on the pair prefixes that end at the
    // last sensitive token: under causal masking those sequences are exactly
    // the region the counterfactual constraints cover, and everything before
    // the first pronoun is shared verbatim.
    let mut spec = vec![vec![0.0; heads]; layers];
    let mut drift = vec![0.0; layers];
    for cf in &corpus.target_pairs {
        let end = cf.saliency_pos() + 1;
        let tx = model.forward_with_trace(&cf.x[..end])?;
        let txp = model.forward_with_trace(&cf.xp[..end])?;
        for (l, row) in spec.iter_mut().enumerate() {
            for (h, cell) in row.iter_mut().enumerate() {
                *cell += delta_spec(&tx, &txp, l, h)? / corpus.target_pairs.len() as f64;
            }
        }
        for (l, cell) in drift.iter_mut().enumerate() {
            *cell += hidden_drift(&tx, &txp, l)? / corpus.target_pairs.len() as f64;
        }
    }

    let (bias_id_mean, bias_id_max) = bias_ratio_eval(model, &corpus.id_templates, pair)?;
    let (bias_ood_mean, bias_ood_max) = bias_ratio_eval(model, &corpus.ood_templates, pair)?;
    let (anchor_accuracy, anchor_perplexity) = anchor_eval(model, &corpus.anchor_prompts)?;

    let mut logit_gap_by_layer = vec![0.0; layers];
    for prompt in &corpus.id_templates {
        let gaps = logit_lens_gap(model, prompt, pair)?;
        for (acc, g) in logit_gap_by_layer.iter_mut().zip(&gaps) {
            *acc += g / corpus.id_templates.len() as f64;
        }
    }

    let mut patch_effects = vec![vec![0.0; heads]; layers];
    for cf in &corpus.target_pairs {
        let end = cf.pronoun_pos + 1;
        let (x, xp) = (&cf.x[..end], &cf.xp[..end]);
        for (l, row) in patch_effects.iter_mut().enumerate() {
            for (h, cell) in row.iter_mut().enumerate() {
                let effect = activation_patch(model, x, xp, l, h, cf.pronoun_pos, pair)?;
                *cell += effect.abs() / corpus.target_pairs.len() as f64;
            }
        }
    }

    let _ = target_layers; // aggregation is reported per layer; callers slice
    Ok(DiagnosticReport {
        delta_spec: spec,
        delta_hidden: drift,
        bias_id_mean,
        bias_id_max,
        bias_ood_mean,
        bias_ood_max,
        anchor_accuracy,
        anchor_perplexity,
        logit_gap_by_layer,
        patch_effects,
        bias_ratio_definition: "max(r, 1/r) with r = P(male pronoun)/P(female pronoun)".into(),
    })
}

impl DiagnosticReport {
    /// Mean of a per-layer-per-head grid restricted to some layers.
    pub fn grid_mean(grid: &[Vec<f64>], layers: &BTreeSet<usize>) -> f64 {
        let mut total = 0.0;
        let mut count = 0usize;
        for &l in layers {
            for v in &grid[l] {
                total += v;
                count += 1;
            }
        }
        total / count.max(1) as f64
    }

    pub fn delta_spec_mean(&self, layers: &BTreeSet<usize>) -> f64 {
        Self::grid_mean(&self.delta_spec, layers)
    }

    pub fn delta_hidden_mean(&self, layers: &BTreeSet<usize>) -> f64 {
        let total: f64 = layers.iter().map(|&l| self.delta_hidden[l]).sum();
        total / layers.len().max(1) as f64
    }
}

// ── CSV rendering ────────────────────────────────────────────────────

/// Layer × head grid as CSV with a `layer` key column.
pub fn layer_head_csv(grid: &[Vec<f64>]) -> String {
    let heads = grid.first().map(Vec::len).unwrap_or(0);
    let mut out = String::from("layer");
    for h in 0..heads {
        out.push_str(&format!(",head{h}"));
    }
    out.push('\n');
    for (l, row) in grid.iter().enumerate() {
        out.push_str(&l.to_string());
        for v in row {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

/// Per-layer vector as CSV.
pub fn layer_vector_csv(values: &[f64]) -> String {
    let mut out = String::from("layer,value\n");
    for (l, v) in values.iter().enumerate() {
        out.push_str(&format!("{l},{v}\n"));
    }
    out
}

/// Per-token vector as CSV.
pub fn token_vector_csv(values: &[f64]) -> String {
    let mut out = String::from("token,value\n");
    for (t, v) in values.iter().enumerate() {
        out.push_str(&format!("{t},{v}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_corpus;
    use crate::model::ModelConfig;

    fn tiny(seed: u64) -> Model {
        let cfg = ModelConfig {
            vocab_size: 12,
            d_model: 8,
            n_layers: 4,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 8,
            seed,
        };
        Model::init(cfg).unwrap()
    }

    #[test]
    fn identical_traces_have_zero_divergence() {
        let m = tiny(1);
        let t = m.forward_with_trace(&[1, 2, 3, 4]).unwrap();
        assert_eq!(delta_spec(&t, &t, 1, 0).unwrap(), 0.0);
        assert_eq!(delta_hidden(&t, &t, &[1, 2].into()).unwrap(), 0.0);
        assert_eq!(
            delta_spec_with_mode(&t, &t, 1, 0, SpectralMode::SingularValue).unwrap(),
            0.0
        );
        let sig = spectral_signature_diff(&t, &t, 2).unwrap();
        assert!(sig.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn divergence_metrics_are_symmetric() {
        let m = tiny(2);
        let tx = m.forward_with_trace(&[1, 2, 3, 4]).unwrap();
        let txp = m.forward_with_trace(&[1, 5, 3, 4]).unwrap();
        assert_eq!(
            delta_spec(&tx, &txp, 1, 1).unwrap(),
            delta_spec(&txp, &tx, 1, 1).unwrap()
        );
        assert_eq!(
            delta_hidden(&tx, &txp, &[1].into()).unwrap(),
            delta_hidden(&txp, &tx, &[1].into()).unwrap()
        );
    }

    #[test]
    fn delta_hidden_is_the_mean_of_token_norms() {
        // Hand-built: T=2, diffs of norm 1 and 3 average to 2.
        let mk = |rows: Vec<f64>| Trace {
            attn: vec![vec![crate::Tensor::matrix(2, 2, vec![1.0, 0.0, 0.5, 0.5])]],
            hidden: vec![crate::Tensor::matrix(2, 2, rows)],
            logits: crate::Tensor::matrix(2, 2, vec![0.0; 4]),
        };
        let tx = mk(vec![1.0, 0.0, 3.0, 0.0]);
        let txp = mk(vec![0.0, 0.0, 0.0, 0.0]);
        let d = delta_hidden(&tx, &txp, &[0].into()).unwrap();
        assert!((d - 2.0).abs() < 1e-15);
    }

    #[test]
    fn single_coordinate_spec_difference_is_that_coordinate() {
        let a = crate::Tensor::matrix(
            3,
            3,
            vec![1.0, 0.0, 0.0, 0.5, 0.5, 0.0, 0.2, 0.3, 0.5],
        );
        // Perturb only the (2,2) entry so λ₂ shifts by exactly 0.1 − 0.1/3
        // ... easier: shift attention within row 2 between cols 1 and 2.
        let b = crate::Tensor::matrix(
            3,
            3,
            vec![1.0, 0.0, 0.0, 0.5, 0.5, 0.0, 0.2, 0.4, 0.4],
        );
        let mk = |attn: crate::Tensor| Trace {
            attn: vec![vec![attn]],
            hidden: vec![crate::Tensor::matrix(3, 2, vec![0.0; 6])],
            logits: crate::Tensor::matrix(3, 2, vec![0.0; 6]),
        };
        let la = laplacian_eigenvalues(&a).unwrap();
        let lb = laplacian_eigenvalues(&b).unwrap();
        let expect =
            ((la[1] - lb[1]).powi(2) + (la[2] - lb[2]).powi(2)).sqrt();
        let got = delta_spec(&mk(a), &mk(b), 0, 0).unwrap();
        assert!((got - expect).abs() < 1e-15);
    }

    #[test]
    fn bias_ratio_is_symmetric_and_at_least_one() {
        let m = tiny(3);
        let templates = vec![vec![1, 2, 3], vec![4, 5]];
        let pair = PronounPair { male: 6, female: 7 };
        let swapped = PronounPair { male: 7, female: 6 };
        let (mean, max) = bias_ratio_eval(&m, &templates, pair).unwrap();
        let (mean_s, max_s) = bias_ratio_eval(&m, &templates, swapped).unwrap();
        assert!(mean >= 1.0 && max >= mean);
        assert!((mean - mean_s).abs() < 1e-12);
        assert!((max - max_s).abs() < 1e-12);
    }

    #[test]
    fn bias_ratio_rejects_empty_templates() {
        let m = tiny(3);
        assert!(matches!(
            bias_ratio_eval(&m, &[], PronounPair { male: 1, female: 2 }),
            Err(DiagnosticsError::EmptyTemplates)
        ));
    }

    #[test]
    fn inverse_ratios_fold_to_the_same_bias() {
        // Ratios 2 and 0.5 both report bias 2.
        let r: f64 = 2.0;
        assert_eq!(r.max(1.0 / r), 2.0);
        let r: f64 = 0.5;
        assert_eq!(r.max(1.0 / r), 2.0);
    }

    #[test]
    fn degenerate_pronoun_pair_has_zero_lens_gap() {
        let m = tiny(4);
        let gaps = logit_lens_gap(&m, &[1, 2, 3], PronounPair { male: 5, female: 5 }).unwrap();
        assert_eq!(gaps.len(), 4);
        assert!(gaps.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn final_layer_lens_gap_matches_output_logits() {
        let m = tiny(5);
        let pair = PronounPair { male: 2, female: 9 };
        let prompt = [1, 2, 3, 4];
        let gaps = logit_lens_gap(&m, &prompt, pair).unwrap();
        let trace = m.forward_with_trace(&prompt).unwrap();
        let out_gap = trace.logits.at(3, 2) - trace.logits.at(3, 9);
        assert!((gaps.last().unwrap() - out_gap).abs() < 1e-9);
    }

    #[test]
    fn self_patch_has_exactly_zero_effect() {
        let m = tiny(6);
        let pair = PronounPair { male: 1, female: 2 };
        let x = [3, 4, 5, 6];
        for layer in 0..4 {
            for head in 0..2 {
                for pos in 0..4 {
                    let e = activation_patch(&m, &x, &x, layer, head, pos, pair).unwrap();
                    assert_eq!(e, 0.0, "layer {layer} head {head} pos {pos}");
                }
            }
        }
    }

    #[test]
    fn final_layer_patch_at_non_final_position_has_zero_effect() {
        let m = tiny(7);
        let pair = PronounPair { male: 1, female: 2 };
        let x = [3, 4, 5, 6];
        let xp = [3, 9, 5, 6];
        for pos in 0..3 {
            let e = activation_patch(&m, &x, &xp, 3, 1, pos, pair).unwrap();
            assert_eq!(e, 0.0, "pos {pos}");
        }
        // The final position at the final layer generally does move.
        let e = activation_patch(&m, &x, &xp, 3, 1, 3, pair).unwrap();
        assert!(e.abs() > 0.0);
    }

    #[test]
    fn patch_rejects_length_mismatch() {
        let m = tiny(7);
        let pair = PronounPair { male: 1, female: 2 };
        assert!(matches!(
            activation_patch(&m, &[1, 2, 3], &[1, 2], 0, 0, 0, pair),
            Err(DiagnosticsError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn signature_diff_with_single_head_reduces_to_lambda_diff() {
        let a = crate::Tensor::matrix(2, 2, vec![1.0, 0.0, 0.7, 0.3]);
        let b = crate::Tensor::matrix(2, 2, vec![1.0, 0.0, 0.4, 0.6]);
        let mk = |attn: crate::Tensor| Trace {
            attn: vec![vec![attn]],
            hidden: vec![crate::Tensor::matrix(2, 2, vec![0.0; 4])],
            logits: crate::Tensor::matrix(2, 2, vec![0.0; 4]),
        };
        let la = laplacian_eigenvalues(&a).unwrap();
        let lb = laplacian_eigenvalues(&b).unwrap();
        let diff = spectral_signature_diff(&mk(a), &mk(b), 0).unwrap();
        assert_eq!(diff[0], 0.0);
        assert!((diff[1] - (la[1] - lb[1]).abs()).abs() < 1e-15);
    }

    #[test]
    fn anchor_ties_count_as_incorrect() {
        let m = tiny(8);
        // gold == foil forces a tie: strictly-greater never holds.
        let anchors = vec![AnchorPrompt {
            prompt: vec![1, 2],
            gold: 3,
            foil: 3,
            sentence: vec![1, 2, 3],
        }];
        let (acc, _) = anchor_eval(&m, &anchors).unwrap();
        assert_eq!(acc, 0.0);
    }

    #[test]
    fn full_report_runs_on_a_corpus_sized_model() {
        let corpus = build_corpus(1);
        let cfg = ModelConfig {
            vocab_size: corpus.vocab.len(),
            d_model: 16,
            n_layers: 4,
            n_heads: 2,
            d_ff: 24,
            max_seq_len: 16,
            seed: 2,
        };
        let m = Model::init(cfg).unwrap();
        let report = full_report(&m, &corpus, &[1, 2].into()).unwrap();
        assert_eq!(report.delta_spec.len(), 4);
        assert_eq!(report.delta_spec[0].len(), 2);
        assert_eq!(report.logit_gap_by_layer.len(), 4);
        assert!(report.bias_id_mean >= 1.0);
        assert!(report.anchor_perplexity > 0.0);
        let csv = layer_head_csv(&report.patch_effects);
        assert!(csv.starts_with("layer,head0,head1\n"));
        assert_eq!(csv.lines().count(), 5);
        let lens_csv = layer_vector_csv(&report.logit_gap_by_layer);
        assert_eq!(lens_csv.lines().count(), 5);
    }
}
