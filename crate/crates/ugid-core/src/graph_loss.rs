//! Structural alignment losses over counterfactual trace pairs.
//!
//! Each attention head at each layer is read as a weighted directed graph on
//! token positions. Its combinatorial Laplacian `L = D − A` is lower
//! triangular under causal masking, so the eigenvalue spectrum is just the
//! diagonal, `λ_t = d_tt − A_tt`, in O(T). The edge loss matches those
//! spectra across a counterfactual input pair; the node loss matches the
//! hidden states directly. Both are focused by a saliency weight derived
//! from the pronoun's attention row (held behind a stop-gradient) and both
//! skip the first position, where softmax parks its excess attention mass.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use thiserror::Error;

use crate::autodiff::{Tape, Tensor, ValueId};
use crate::model::Trace;

#[derive(Debug, Error)]
pub enum GraphLossError {
    #[error("non-causal attention")]
    NonCausal,
    #[error("attention matrix is not square: {rows}×{cols}")]
    NonSquare { rows: usize, cols: usize },
    #[error("no target layers")]
    NoTargetLayers,
    #[error("target layer {layer} out of range (trace has {layers} layers)")]
    LayerOutOfRange { layer: usize, layers: usize },
    #[error("pronoun position {p} out of range for length {len}")]
    PronounOutOfRange { p: usize, len: usize },
    #[error("trace shapes differ between counterfactual sides")]
    ShapeMismatch,
}

/// Per-position structural-loss mask: position 0 is excluded, every later
/// position participates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SinkMask {
    mask: Vec<u8>,
}

impl SinkMask {
    pub fn new(len: usize) -> Self {
        let mut mask = vec![1u8; len];
        if !mask.is_empty() {
            mask[0] = 0;
        }
        SinkMask { mask }
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn is_active(&self, t: usize) -> bool {
        self.mask[t] == 1
    }

    /// Number of participating positions, `Σ M`.
    pub fn active_count(&self) -> usize {
        self.mask.iter().map(|&m| m as usize).sum()
    }
}

/// Eigenvalues of the causal attention Laplacian at one `(layer, head)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralSignature {
    pub layer: usize,
    pub head: usize,
    pub lambda: Vec<f64>,
}

fn check_square(attn: &Tensor) -> Result<usize, GraphLossError> {
    if attn.shape().len() != 2 || attn.rows() != attn.cols() {
        return Err(GraphLossError::NonSquare {
            rows: attn.shape()[0],
            cols: *attn.shape().last().unwrap_or(&0),
        });
    }
    Ok(attn.rows())
}

fn check_causal(attn: &Tensor) -> Result<usize, GraphLossError> {
    let t = check_square(attn)?;
    for i in 0..t {
        for j in (i + 1)..t {
            if attn.at(i, j).abs() > 1e-12 {
                return Err(GraphLossError::NonCausal);
            }
        }
    }
    Ok(t)
}

/// Diagonal of the normalized in-degree matrix: column sums over sequence
/// length, `d_tt = (1/T) Σ_q A_{q,t}`.
pub fn in_degree(attn: &Tensor) -> Result<Vec<f64>, GraphLossError> {
    let t = check_square(attn)?;
    let mut d = vec![0.0; t];
    for q in 0..t {
        for c in 0..t {
            d[c] += attn.at(q, c);
        }
    }
    for v in &mut d {
        *v /= t as f64;
    }
    Ok(d)
}

/// Eigenvalues of `L = D − A` for a causal attention matrix, read straight
/// off the diagonal: `λ_t = d_tt − A_tt`. Exact because `L` is lower
/// triangular; O(T) after the column sums.
pub fn laplacian_eigenvalues(attn: &Tensor) -> Result<Vec<f64>, GraphLossError> {
    check_causal(attn)?;
    let d = in_degree(attn)?;
    Ok(d.iter().enumerate().map(|(t, &dt)| dt - attn.at(t, t)).collect())
}

/// Signature for one head of one layer of a trace.
pub fn spectral_signature(
    trace: &Trace,
    layer: usize,
    head: usize,
) -> Result<SpectralSignature, GraphLossError> {
    let lambda = laplacian_eigenvalues(&trace.attn[layer][head])?;
    Ok(SpectralSignature { layer, head, lambda })
}

/// Saliency for one head: the pronoun row averaged across the pair,
/// `ω_t = ½ (A_{p,t}(x) + A_{p,t}(x'))`. Always used behind stop-gradient.
pub fn saliency_weights(
    attn_x: &Tensor,
    attn_xp: &Tensor,
    pronoun_pos: usize,
) -> Result<Vec<f64>, GraphLossError> {
    let t = check_square(attn_x)?;
    if check_square(attn_xp)? != t {
        return Err(GraphLossError::ShapeMismatch);
    }
    if pronoun_pos >= t {
        return Err(GraphLossError::PronounOutOfRange { p: pronoun_pos, len: t });
    }
    Ok((0..t).map(|c| 0.5 * (attn_x.at(pronoun_pos, c) + attn_xp.at(pronoun_pos, c))).collect())
}

/// Saliency per `(layer, head)` for a whole trace pair.
pub type SaliencyTable = BTreeMap<(usize, usize), Vec<f64>>;

pub fn saliency_table(
    trace_x: &Trace,
    trace_xp: &Trace,
    pronoun_pos: usize,
) -> Result<SaliencyTable, GraphLossError> {
    let mut table = SaliencyTable::new();
    for (layer, heads) in trace_x.attn.iter().enumerate() {
        for (head, attn) in heads.iter().enumerate() {
            let w = saliency_weights(attn, &trace_xp.attn[layer][head], pronoun_pos)?;
            table.insert((layer, head), w);
        }
    }
    Ok(table)
}

fn validate_layers(
    target_layers: &BTreeSet<usize>,
    layers: usize,
) -> Result<(), GraphLossError> {
    if target_layers.is_empty() {
        return Err(GraphLossError::NoTargetLayers);
    }
    if let Some(&layer) = target_layers.iter().find(|&&l| l >= layers) {
        return Err(GraphLossError::LayerOutOfRange { layer, layers });
    }
    Ok(())
}

/// On-tape λ vector for one attention matrix.
fn lambda_on_tape(tape: &mut Tape, attn: ValueId, t: usize) -> ValueId {
    let sums = tape.col_sums(attn);
    let d = tape.scale(sums, 1.0 / t as f64);
    let diag = tape.diag(attn);
    tape.sub(d, diag)
}

/// Saliency row for one head, stop-gradient applied, as a length-T vector.
fn saliency_on_tape(tape: &mut Tape, attn_x: ValueId, attn_xp: ValueId, p: usize) -> ValueId {
    let t = tape.value(attn_x).rows();
    let row_x = tape.slice_axis0(attn_x, p, 1);
    let row_xp = tape.slice_axis0(attn_xp, p, 1);
    let sum = tape.add(row_x, row_xp);
    let avg = tape.scale(sum, 0.5);
    let flat = tape.reshape(avg, vec![t]);
    tape.stop_gradient(flat)
}

/// How saliency enters a structural loss.
#[derive(Clone, Copy)]
pub enum SaliencySource<'a> {
    /// Recompute from the live attention nodes, behind stop-gradient.
    Live,
    /// Use precomputed constants. Gradients are identical to `Live` by
    /// construction; this variant exists so tests can verify that claim.
    Frozen(&'a SaliencyTable),
}

fn head_saliency(
    tape: &mut Tape,
    source: SaliencySource,
    attn_x: ValueId,
    attn_xp: ValueId,
    layer: usize,
    head: usize,
    p: usize,
) -> ValueId {
    match source {
        SaliencySource::Live => saliency_on_tape(tape, attn_x, attn_xp, p),
        SaliencySource::Frozen(table) => {
            let w = table[&(layer, head)].clone();
            tape.constant(Tensor::vector(w))
        }
    }
}

/// Spectral edge-alignment loss over the target layers:
///
/// `Σ_l (1 / (H · ΣM)) Σ_h Σ_t M_t · sg(ω_{l,h,t}) · (λ_{l,h,t}(x) − λ_{l,h,t}(x'))²`
///
/// Positions masked out by the sink mask are sliced away before any term is
/// formed, so no gradient path exists through them.
#[allow(clippy::too_many_arguments)]
pub fn edge_loss_on_tape(
    tape: &mut Tape,
    attn_x: &[Vec<ValueId>],
    attn_xp: &[Vec<ValueId>],
    pronoun_pos: usize,
    target_layers: &BTreeSet<usize>,
    saliency: SaliencySource,
) -> Result<ValueId, GraphLossError> {
    validate_layers(target_layers, attn_x.len())?;
    if attn_x.len() != attn_xp.len() {
        return Err(GraphLossError::ShapeMismatch);
    }
    let t = tape.value(attn_x[0][0]).rows();
    if pronoun_pos >= t {
        return Err(GraphLossError::PronounOutOfRange { p: pronoun_pos, len: t });
    }
    if t == 1 {
        // Sink masking removes the only position.
        return Ok(tape.constant_scalar(0.0));
    }

    let mut total: Option<ValueId> = None;
    for &layer in target_layers {
        let heads = attn_x[layer].len();
        let mut layer_sum: Option<ValueId> = None;
        for head in 0..heads {
            let ax = attn_x[layer][head];
            let axp = attn_xp[layer][head];
            let lam_x = lambda_on_tape(tape, ax, t);
            let lam_xp = lambda_on_tape(tape, axp, t);
            let diff = tape.sub(lam_x, lam_xp);
            let diff_tail = tape.slice_axis0(diff, 1, t - 1);
            let sq = tape.mul(diff_tail, diff_tail);
            let omega = head_saliency(tape, saliency, ax, axp, layer, head, pronoun_pos);
            let omega_tail = tape.slice_axis0(omega, 1, t - 1);
            let weighted = tape.mul(sq, omega_tail);
            let term = tape.sum(weighted);
            layer_sum = Some(match layer_sum {
                Some(acc) => tape.add(acc, term),
                None => term,
            });
        }
        let norm = 1.0 / (heads as f64 * (t - 1) as f64);
        let scaled = tape.scale(layer_sum.unwrap(), norm);
        total = Some(match total {
            Some(acc) => tape.add(acc, scaled),
            None => scaled,
        });
    }
    Ok(total.unwrap())
}

/// Node-alignment loss over the target layers:
///
/// `Σ_l (1 / ΣM) Σ_t M_t · ω̄_{l,t} · ‖H_{l,t}(x) − H_{l,t}(x')‖²`
///
/// with `ω̄` the head-mean of the stop-gradient saliency.
#[allow(clippy::too_many_arguments)]
pub fn node_loss_on_tape(
    tape: &mut Tape,
    attn_x: &[Vec<ValueId>],
    attn_xp: &[Vec<ValueId>],
    hidden_x: &[ValueId],
    hidden_xp: &[ValueId],
    pronoun_pos: usize,
    target_layers: &BTreeSet<usize>,
    saliency: SaliencySource,
) -> Result<ValueId, GraphLossError> {
    validate_layers(target_layers, hidden_x.len())?;
    if hidden_x.len() != hidden_xp.len() || attn_x.len() != hidden_x.len() {
        return Err(GraphLossError::ShapeMismatch);
    }
    let t = tape.value(hidden_x[0]).rows();
    if pronoun_pos >= t {
        return Err(GraphLossError::PronounOutOfRange { p: pronoun_pos, len: t });
    }
    if t == 1 {
        return Ok(tape.constant_scalar(0.0));
    }

    let mut total: Option<ValueId> = None;
    for &layer in target_layers {
        let heads = attn_x[layer].len();
        // Head-mean saliency, stop-gradient already applied per head.
        let mut omega_sum: Option<ValueId> = None;
        for head in 0..heads {
            let w = head_saliency(
                tape,
                saliency,
                attn_x[layer][head],
                attn_xp[layer][head],
                layer,
                head,
                pronoun_pos,
            );
            omega_sum = Some(match omega_sum {
                Some(acc) => tape.add(acc, w),
                None => w,
            });
        }
        let omega_bar = tape.scale(omega_sum.unwrap(), 1.0 / heads as f64);
        let omega_tail = tape.slice_axis0(omega_bar, 1, t - 1);

        let diff = tape.sub(hidden_x[layer], hidden_xp[layer]);
        let diff_tail = tape.slice_axis0(diff, 1, t - 1);
        let sq = tape.mul(diff_tail, diff_tail);
        let norms = tape.row_sums(sq);
        let weighted = tape.mul(norms, omega_tail);
        let term = tape.sum(weighted);
        let scaled = tape.scale(term, 1.0 / (t - 1) as f64);
        total = Some(match total {
            Some(acc) => tape.add(acc, scaled),
            None => scaled,
        });
    }
    Ok(total.unwrap())
}

fn register_trace(tape: &mut Tape, trace: &Trace) -> (Vec<Vec<ValueId>>, Vec<ValueId>) {
    let attn = trace
        .attn
        .iter()
        .map(|heads| heads.iter().map(|a| tape.constant(a.clone())).collect())
        .collect();
    let hidden = trace.hidden.iter().map(|h| tape.constant(h.clone())).collect();
    (attn, hidden)
}

/// Value of the edge loss for plain traces.
pub fn edge_loss(
    trace_x: &Trace,
    trace_xp: &Trace,
    pronoun_pos: usize,
    target_layers: &BTreeSet<usize>,
) -> Result<f64, GraphLossError> {
    let mut tape = Tape::new();
    let (ax, _) = register_trace(&mut tape, trace_x);
    let (axp, _) = register_trace(&mut tape, trace_xp);
    let id = edge_loss_on_tape(&mut tape, &ax, &axp, pronoun_pos, target_layers, SaliencySource::Live)?;
    Ok(tape.value(id).data()[0])
}

/// Value of the node loss for plain traces.
pub fn node_loss(
    trace_x: &Trace,
    trace_xp: &Trace,
    pronoun_pos: usize,
    target_layers: &BTreeSet<usize>,
) -> Result<f64, GraphLossError> {
    let mut tape = Tape::new();
    let (ax, hx) = register_trace(&mut tape, trace_x);
    let (axp, hxp) = register_trace(&mut tape, trace_xp);
    let id = node_loss_on_tape(
        &mut tape,
        &ax,
        &axp,
        &hx,
        &hxp,
        pronoun_pos,
        target_layers,
        SaliencySource::Live,
    )?;
    Ok(tape.value(id).data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn causal(t: usize, rows: Vec<Vec<f64>>) -> Tensor {
        let mut data = vec![0.0; t * t];
        for (i, row) in rows.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                data[i * t + j] = v;
            }
        }
        Tensor::matrix(t, t, data)
    }

    #[test]
    fn in_degree_matches_column_sum_oracle() {
        let a = causal(3, vec![vec![1.0], vec![0.6, 0.4], vec![0.2, 0.3, 0.5]]);
        let d = in_degree(&a).unwrap();
        assert!((d[0] - 0.6).abs() < 1e-15);
        assert!((d[1] - 0.7 / 3.0).abs() < 1e-15);
        assert!((d[2] - 0.5 / 3.0).abs() < 1e-15);
        // Total mass is T/T = 1 for any row-stochastic matrix.
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn in_degree_of_identity_attention_is_uniform() {
        let t = 4;
        let mut data = vec![0.0; t * t];
        for i in 0..t {
            data[i * t + i] = 1.0;
        }
        let d = in_degree(&Tensor::matrix(t, t, data)).unwrap();
        for v in d {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn eigenvalues_match_hand_derived_example() {
        let a = causal(3, vec![vec![1.0], vec![0.6, 0.4], vec![0.2, 0.3, 0.5]]);
        let lam = laplacian_eigenvalues(&a).unwrap();
        assert!((lam[0] - (-0.4)).abs() < 1e-15);
        assert!((lam[1] - (-1.0 / 6.0)).abs() < 1e-15);
        assert!((lam[2] - (-1.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn identity_attention_eigenvalues() {
        let t = 5;
        let mut data = vec![0.0; t * t];
        for i in 0..t {
            data[i * t + i] = 1.0;
        }
        let lam = laplacian_eigenvalues(&Tensor::matrix(t, t, data)).unwrap();
        for v in lam {
            assert!((v - (1.0 / 5.0 - 1.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn non_causal_matrix_is_rejected() {
        let mut a = causal(3, vec![vec![1.0], vec![0.5, 0.5], vec![0.1, 0.2, 0.7]]);
        a.data_mut()[1] = 0.3; // entry (0, 1)
        let err = laplacian_eigenvalues(&a).unwrap_err();
        assert_eq!(err.to_string(), "non-causal attention");
    }

    #[test]
    fn non_square_is_rejected() {
        let a = Tensor::matrix(2, 3, vec![0.0; 6]);
        assert!(in_degree(&a).is_err());
    }

    #[test]
    fn saliency_is_the_pair_mean_of_the_pronoun_row() {
        let ax = causal(2, vec![vec![1.0], vec![0.7, 0.3]]);
        let axp = causal(2, vec![vec![1.0], vec![0.5, 0.5]]);
        let w = saliency_weights(&ax, &axp, 1).unwrap();
        assert!((w[0] - 0.6).abs() < 1e-15);
        assert!((w[1] - 0.4).abs() < 1e-15);
        // Mean of two stochastic rows stays stochastic.
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    fn one_head_trace(attn: Tensor, hidden: Tensor) -> Trace {
        let t = attn.rows();
        let vocab = 3;
        Trace {
            attn: vec![vec![attn]],
            hidden: vec![hidden],
            logits: Tensor::matrix(t, vocab, vec![0.0; t * vocab]),
        }
    }

    #[test]
    fn identical_traces_give_exactly_zero() {
        let a = causal(3, vec![vec![1.0], vec![0.6, 0.4], vec![0.2, 0.3, 0.5]]);
        let h = Tensor::matrix(3, 2, vec![0.3, -0.1, 0.5, 0.2, -0.7, 0.9]);
        let tx = one_head_trace(a.clone(), h.clone());
        let txp = one_head_trace(a, h);
        let layers: BTreeSet<usize> = [0].into();
        assert_eq!(edge_loss(&tx, &txp, 1, &layers).unwrap(), 0.0);
        assert_eq!(node_loss(&tx, &txp, 1, &layers).unwrap(), 0.0);
    }

    #[test]
    fn minimal_edge_instance_closed_form() {
        // T=2, single layer and head. Only t=1 participates: loss = ω₁ δ².
        let ax = causal(2, vec![vec![1.0], vec![0.7, 0.3]]);
        let axp = causal(2, vec![vec![1.0], vec![0.5, 0.5]]);
        let lam_x = laplacian_eigenvalues(&ax).unwrap();
        let lam_xp = laplacian_eigenvalues(&axp).unwrap();
        let delta = lam_x[1] - lam_xp[1];
        let w = saliency_weights(&ax, &axp, 1).unwrap()[1];
        let tx = one_head_trace(ax, Tensor::matrix(2, 2, vec![0.0; 4]));
        let txp = one_head_trace(axp, Tensor::matrix(2, 2, vec![0.0; 4]));
        let layers: BTreeSet<usize> = [0].into();
        let loss = edge_loss(&tx, &txp, 1, &layers).unwrap();
        assert!((loss - w * delta * delta).abs() < 1e-15, "{loss}");
    }

    #[test]
    fn minimal_node_instance_closed_form() {
        // T=2, hidden diff v at t=1 with saliency w: loss = w‖v‖².
        let ax = causal(2, vec![vec![1.0], vec![0.7, 0.3]]);
        let hx = Tensor::matrix(2, 3, vec![0.0, 0.0, 0.0, 1.0, 2.0, 3.0]);
        let hxp = Tensor::matrix(2, 3, vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        let tx = one_head_trace(ax.clone(), hx);
        let txp = one_head_trace(ax, hxp);
        let layers: BTreeSet<usize> = [0].into();
        let loss = node_loss(&tx, &txp, 1, &layers).unwrap();
        let v = [1.0, 2.0, 2.0];
        let norm_sq: f64 = v.iter().map(|x| x * x).sum();
        // ω at t=1 is A[1,1] of the shared attention matrix = 0.3.
        assert!((loss - 0.3 * norm_sq).abs() < 1e-12, "{loss}");
    }

    #[test]
    fn empty_target_layers_is_an_error() {
        let a = causal(2, vec![vec![1.0], vec![0.5, 0.5]]);
        let t = one_head_trace(a.clone(), Tensor::matrix(2, 2, vec![0.0; 4]));
        let t2 = one_head_trace(a, Tensor::matrix(2, 2, vec![0.0; 4]));
        let err = edge_loss(&t, &t2, 1, &BTreeSet::new()).unwrap_err();
        assert_eq!(err.to_string(), "no target layers");
    }

    #[test]
    fn length_one_sequences_yield_zero_losses() {
        let a = causal(1, vec![vec![1.0]]);
        let h = Tensor::matrix(1, 2, vec![0.4, 0.5]);
        let tx = one_head_trace(a.clone(), h.clone());
        let txp = one_head_trace(a, h);
        let layers: BTreeSet<usize> = [0].into();
        assert_eq!(edge_loss(&tx, &txp, 0, &layers).unwrap(), 0.0);
        assert_eq!(node_loss(&tx, &txp, 0, &layers).unwrap(), 0.0);
    }
}
