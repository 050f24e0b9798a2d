//! Scratch attention/distribution probe for the pretrained teacher.

use ugid_core::model::{Model, ModelConfig};
use ugid_core::trainer::{self, PretrainConfig};

fn main() {
    let seed = 42;
    let corpus = ugid_core::build_corpus(seed);
    let mcfg = ModelConfig::toy_default(seed);
    let mut teacher = Model::init(mcfg.clone()).unwrap();
    let pcfg = PretrainConfig::toy_default(mcfg.vocab_size, seed);
    let out = trainer::pretrain(&mut teacher, &corpus.pretrain, &pcfg).unwrap();
    println!("pretrain steps {} ppl {:.3}", out.steps_run, out.final_perplexity);

    let pair = &corpus.target_pairs[0];
    println!("pair: {}", corpus.vocab.detokenize(&pair.x).unwrap());
    let trace = teacher.forward_with_trace(&pair.x).unwrap();
    let p = pair.pronoun_pos;
    for (l, heads) in trace.attn.iter().enumerate() {
        let t = pair.x.len();
        let mut row = vec![0.0; t];
        for a in heads {
            for (c, r) in row.iter_mut().enumerate() {
                *r += a.at(p, c) / heads.len() as f64;
            }
        }
        println!(
            "layer {l} pronoun row: {:?}",
            row.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>()
        );
    }

    // hidden norms and drift location
    let trace_xp = teacher.forward_with_trace(&pair.xp).unwrap();
    for l in [2usize, 3] {
        let hx = &trace.hidden[l];
        let hxp = &trace_xp.hidden[l];
        let drifts: Vec<f64> = (0..pair.x.len())
            .map(|t| {
                (0..hx.cols())
                    .map(|c| (hx.at(t, c) - hxp.at(t, c)).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        println!(
            "layer {l} drift by pos: {:?}",
            drifts.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>()
        );
    }

    // anchor distributions
    for a in corpus.anchor_prompts.iter().take(4) {
        let d = teacher.next_token_distribution(&a.prompt).unwrap();
        println!(
            "anchor '{}' -> gold {:.4} foil {:.4}",
            corpus.vocab.detokenize(&a.prompt).unwrap(),
            d[a.gold],
            d[a.foil]
        );
    }
    // id template distributions
    for t in corpus.id_templates.iter().take(4) {
        let d = teacher.next_token_distribution(t).unwrap();
        println!(
            "id '{}' -> he {:.4} she {:.4}",
            corpus.vocab.detokenize(t).unwrap(),
            d[corpus.pronouns.male],
            d[corpus.pronouns.female]
        );
    }
}
