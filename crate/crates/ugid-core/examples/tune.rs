//! Scratch pipeline runner used while tuning defaults.

use std::collections::BTreeSet;
use std::time::Instant;
use ugid_core::diagnostics::{self, full_report};
use ugid_core::model::{Model, ModelConfig};
use ugid_core::trainer::{self, PretrainConfig, TrainConfig};

fn main() {
    let seed = 42;
    let corpus = ugid_core::build_corpus(seed);
    println!("vocab {} pretrain {} heldout {}", corpus.vocab.len(), corpus.pretrain.len(), corpus.heldout.len());

    let mcfg = ModelConfig::toy_default(seed);
    let mut teacher = Model::init(mcfg.clone()).unwrap();

    let t0 = Instant::now();
    let pcfg = PretrainConfig::toy_default(mcfg.vocab_size, seed);
    match trainer::pretrain(&mut teacher, &corpus.pretrain, &pcfg) {
        Ok(out) => println!(
            "pretrain: {} steps, ppl {:.3} in {:.1?}; log {:?}",
            out.steps_run, out.final_perplexity, t0.elapsed(), out.perplexity_log
        ),
        Err(e) => {
            println!("pretrain FAILED: {e}");
            return;
        }
    }

    let pair = corpus.pronouns;
    let (bias_id, bias_id_max) = diagnostics::bias_ratio_eval(&teacher, &corpus.id_templates, pair).unwrap();
    let (bias_ood, bias_ood_max) = diagnostics::bias_ratio_eval(&teacher, &corpus.ood_templates, pair).unwrap();
    let (anchor_acc, anchor_ppl) = diagnostics::anchor_eval(&teacher, &corpus.anchor_prompts).unwrap();
    let held_ppl = teacher.perplexity(&corpus.heldout).unwrap();
    println!("teacher: bias_id {bias_id:.3}/{bias_id_max:.3} ood {bias_ood:.3}/{bias_ood_max:.3} anchors {anchor_acc:.2} (ppl {anchor_ppl:.2}) heldout_ppl {held_ppl:.3}");

    let s_target: BTreeSet<usize> = [2, 3].into();
    let pre_report = full_report(&teacher, &corpus, &s_target).unwrap();
    println!(
        "teacher: dspec(target) {:.5} dhidden(target) {:.5} lens {:?}",
        pre_report.delta_spec_mean(&s_target),
        pre_report.delta_hidden_mean(&s_target),
        pre_report.logit_gap_by_layer.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>()
    );

    // UGID run
    let mut student = teacher.clone();
    let tcfg = TrainConfig::toy_default(seed);
    let t1 = Instant::now();
    let out = trainer::train(&mut student, &teacher, &corpus, &tcfg).unwrap();
    println!("ugid: {} steps in {:.1?}", out.records.len(), t1.elapsed());
    let first_target = out.records.iter().find(|r| matches!(r.kind, ugid_core::PairKind::Target)).unwrap();
    let last_target = out.records.iter().rev().find(|r| matches!(r.kind, ugid_core::PairKind::Target)).unwrap();
    println!(
        "loss first: edge {:.5} node {:.5} logit {:.5} topk {:.5} kl {:.5}",
        first_target.edge, first_target.node, first_target.logit, first_target.topk, first_target.kl
    );
    println!(
        "loss last:  edge {:.5} node {:.5} logit {:.5} topk {:.5} kl {:.5}",
        last_target.edge, last_target.node, last_target.logit, last_target.topk, last_target.kl
    );
    for s in &out.snapshots {
        println!("  snap step {} bias_id {:.3} anchors {:.2}", s.step, s.bias_id_mean, s.anchor_accuracy);
    }

    let (bias_id2, bias_id_max2) = diagnostics::bias_ratio_eval(&student, &corpus.id_templates, pair).unwrap();
    let (bias_ood2, bias_ood_max2) = diagnostics::bias_ratio_eval(&student, &corpus.ood_templates, pair).unwrap();
    let (anchor_acc2, anchor_ppl2) = diagnostics::anchor_eval(&student, &corpus.anchor_prompts).unwrap();
    let held_ppl2 = student.perplexity(&corpus.heldout).unwrap();
    println!("student: bias_id {bias_id2:.3}/{bias_id_max2:.3} ood {bias_ood2:.3}/{bias_ood_max2:.3} anchors {anchor_acc2:.2} (ppl {anchor_ppl2:.2}) heldout_ppl {held_ppl2:.3} (ratio {:.3})", held_ppl2 / held_ppl);

    let post_report = full_report(&student, &corpus, &s_target).unwrap();
    println!(
        "student: dspec(target) {:.6} (x{:.3}) dhidden(target) {:.6} (x{:.3})",
        post_report.delta_spec_mean(&s_target),
        post_report.delta_spec_mean(&s_target) / pre_report.delta_spec_mean(&s_target),
        post_report.delta_hidden_mean(&s_target),
        post_report.delta_hidden_mean(&s_target) / pre_report.delta_hidden_mean(&s_target),
    );

    // patch effects within target layers
    let max_patch = |report: &ugid_core::DiagnosticReport| -> f64 {
        s_target
            .iter()
            .flat_map(|&l| report.patch_effects[l].iter().cloned())
            .fold(0.0f64, f64::max)
    };
    println!("patch max pre {:.4} post {:.4}", max_patch(&pre_report), max_patch(&post_report));
    let lens_mean = |r: &ugid_core::DiagnosticReport| -> f64 {
        let from = *s_target.iter().next().unwrap();
        let gaps = &r.logit_gap_by_layer[from..];
        gaps.iter().map(|g| g.abs()).sum::<f64>() / gaps.len() as f64
    };
    println!("lens mean(|gap|, layers>=2) pre {:.4} post {:.4}", lens_mean(&pre_report), lens_mean(&post_report));

    // Ablation: w/o node
    let mut ablated = teacher.clone();
    let mut acfg = tcfg.clone();
    acfg.node_weight = 0.0;
    trainer::train(&mut ablated, &teacher, &corpus, &acfg).unwrap();
    let ab_report = full_report(&ablated, &corpus, &s_target).unwrap();
    println!(
        "w/o node: dhidden(target) {:.6} vs full {:.6} (x{:.2})",
        ab_report.delta_hidden_mean(&s_target),
        post_report.delta_hidden_mean(&s_target),
        ab_report.delta_hidden_mean(&s_target) / post_report.delta_hidden_mean(&s_target),
    );
}
