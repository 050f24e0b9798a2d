//! Scratch: seed study with settled pretraining; teachers cached on disk.
use std::collections::BTreeSet;
use std::path::PathBuf;
use ugid_core::checkpoint;
use ugid_core::diagnostics::full_report;
use ugid_core::model::{Model, ModelConfig};
use ugid_core::trainer::{self, PretrainConfig, TrainConfig};

fn teacher_for(seed: u64, tag: &str, corpus: &ugid_core::Corpus) -> Model {
    let dir = PathBuf::from("/tmp/ugid-teachers");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join(format!("teacher-{tag}-{seed}.ugid"));
    if path.exists() {
        if let Ok(m) = checkpoint::load(&path) {
            return m;
        }
    }
    let mcfg = ModelConfig::toy_default(seed);
    let mut teacher = Model::init(mcfg.clone()).unwrap();
    let pcfg = PretrainConfig::toy_default(mcfg.vocab_size, seed);
    trainer::pretrain(&mut teacher, &corpus.pretrain, &pcfg).unwrap();
    checkpoint::save(&teacher, &path).unwrap();
    teacher
}

fn main() {
    let tag = std::env::args().nth(1).unwrap_or_else(|| "v1".into());
    for seed in [40u64, 41, 42, 43, 44, 45, 46] {
        let corpus = ugid_core::build_corpus(seed);
        let teacher = teacher_for(seed, &tag, &corpus);
        let s_target: BTreeSet<usize> = [2, 3].into();
        let held_t = teacher.perplexity(&corpus.heldout).unwrap();
        let pre = full_report(&teacher, &corpus, &s_target).unwrap();
        let pre_spec = pre.delta_spec_mean(&s_target);
        let pre_hidden = pre.delta_hidden_mean(&s_target);
        let pre_patch = s_target.iter().flat_map(|&l| pre.patch_effects[l].iter().cloned()).fold(0.0f64, f64::max);
        let pair0 = &corpus.target_pairs[0];
        let trace = teacher.forward_with_trace(&pair0.x).unwrap();
        let p = pair0.pronoun_pos;
        let grip: f64 = s_target.iter().map(|&l| {
            trace.attn[l].iter().map(|a| a.at(p, p)).sum::<f64>() / trace.attn[l].len() as f64
        }).sum::<f64>() / 2.0;
        println!(
            "seed {seed}: bias {:.2} ood {:.2} anc {:.2} grip {grip:.3} dspec {pre_spec:.5} dhidden {pre_hidden:.4} patch {pre_patch:.5}",
            pre.bias_id_mean, pre.bias_ood_mean, pre.anchor_accuracy
        );
        let tcfg = TrainConfig::toy_default(seed);
        let mut student = teacher.clone();
        match trainer::train(&mut student, &teacher, &corpus, &tcfg) {
            Ok(_) => {
                let post = full_report(&student, &corpus, &s_target).unwrap();
                let patch = s_target.iter().flat_map(|&l| post.patch_effects[l].iter().cloned()).fold(0.0f64, f64::max);
                println!(
                    "  id {:.3} ood {:.3} anc {:.2} hld {:.3} dspec x{:.3} dhidden x{:.3} patch x{:.3}",
                    post.bias_id_mean, post.bias_ood_mean, post.anchor_accuracy,
                    student.perplexity(&corpus.heldout).unwrap() / held_t,
                    post.delta_spec_mean(&s_target) / pre_spec,
                    post.delta_hidden_mean(&s_target) / pre_hidden,
                    patch / pre_patch,
                );
                let mut ablated = teacher.clone();
                let mut acfg = tcfg.clone();
                acfg.node_weight = 0.0;
                match trainer::train(&mut ablated, &teacher, &corpus, &acfg) {
                    Ok(_) => {
                        let ab = full_report(&ablated, &corpus, &s_target).unwrap();
                        println!(
                            "  ablation dhidden ratio to full {:.2}",
                            ab.delta_hidden_mean(&s_target) / post.delta_hidden_mean(&s_target),
                        );
                    }
                    Err(e) => println!("  ablation DIVERGED ({e})"),
                }
            }
            Err(e) => println!("  DIVERGED ({e})"),
        }
    }
}
