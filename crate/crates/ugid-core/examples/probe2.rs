//! Scratch probe: per-template OOD bias and patch-position sweep.

use std::collections::BTreeSet;
use ugid_core::diagnostics::activation_patch;
use ugid_core::model::{Model, ModelConfig};
use ugid_core::trainer::{self, PretrainConfig, TrainConfig};

fn main() {
    let seed = 42;
    let corpus = ugid_core::build_corpus(seed);
    let mcfg = ModelConfig::toy_default(seed);
    let mut teacher = Model::init(mcfg.clone()).unwrap();
    let pcfg = PretrainConfig::toy_default(mcfg.vocab_size, seed);
    trainer::pretrain(&mut teacher, &corpus.pretrain, &pcfg).unwrap();
    let mut student = teacher.clone();
    let tcfg = TrainConfig::toy_default(seed);
    trainer::train(&mut student, &teacher, &corpus, &tcfg).unwrap();

    let pair = corpus.pronouns;
    println!("=== OOD templates: teacher vs student ratio ===");
    for t in &corpus.ood_templates {
        let dt = teacher.next_token_distribution(t).unwrap();
        let ds = student.next_token_distribution(t).unwrap();
        let rt = dt[pair.male] / dt[pair.female];
        let rs = ds[pair.male] / ds[pair.female];
        println!(
            "{:44} teacher {:8.3} student {:8.3}",
            corpus.vocab.detokenize(t).unwrap(),
            rt.max(1.0 / rt),
            rs.max(1.0 / rs)
        );
    }

    println!("=== patch at pronoun position over target pairs, layers 2,3 ===");
    let s_target: BTreeSet<usize> = [2, 3].into();
    for model_name in ["teacher", "student"] {
        let model = if model_name == "teacher" { &teacher } else { &student };
        let mut overall: f64 = 0.0;
        for &l in &s_target {
            for h in 0..mcfg.n_heads {
                let mut best = 0.0f64;
                for cf in &corpus.target_pairs {
                    let end = cf.pronoun_pos + 1;
                    let e = activation_patch(model, &cf.x[..end], &cf.xp[..end], l, h, cf.pronoun_pos, pair)
                        .unwrap();
                    if e.abs() > best {
                        best = e.abs();
                    }
                }
                print!("{best:9.4}");
                overall = overall.max(best);
            }
        }
        println!("   {model_name} max {overall:.4}");
    }
}
