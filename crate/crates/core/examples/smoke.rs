// Scratch harness: times one full pipeline pass on a shrunken corpus.
use cyclespeech::corpus::{generate_corpus, CorpusConfig, CorpusData};
use cyclespeech::losses::Variant;
use cyclespeech::trainer::{self, ExperimentConfig};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let train: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);

    let corpus_cfg = CorpusConfig {
        train_utterances: train,
        text_utterances: (train as f64 * 0.8) as usize,
        dev_utterances: 50,
        eval_utterances: 50,
        seed,
        ..CorpusConfig::default()
    };
    let dir = std::env::temp_dir().join(format!("cyclespeech-smoke-{seed}"));
    let _ = std::fs::remove_dir_all(&dir);
    let t0 = Instant::now();
    let manifest = generate_corpus(&corpus_cfg, &dir).unwrap();
    let data = CorpusData::load(&manifest).unwrap();
    println!(
        "corpus: {} paired / {} unpaired / {} text, gen+load {:.1}s",
        data.paired.len(),
        data.unpaired_speech.len(),
        data.unpaired_text.len(),
        t0.elapsed().as_secs_f64()
    );

    let env_usize = |k: &str, d: usize| -> usize {
        std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d)
    };
    let defaults = ExperimentConfig::default();
    let cfg = ExperimentConfig {
        seed,
        retrain_epochs: env_usize("SMOKE_RETRAIN_EPOCHS", defaults.retrain_epochs),
        initial_epochs: env_usize("SMOKE_INITIAL_EPOCHS", defaults.initial_epochs),
        hidden_dim: env_usize("SMOKE_H", defaults.hidden_dim),
        ..defaults
    };

    let t1 = Instant::now();
    let (initial, log) = trainer::train_initial(&cfg, &data).unwrap();
    for r in &log.records {
        println!(
            "init epoch {:2} loss {:8.4} dev_cer {:.4} ({:.1}s)",
            r.epoch, r.total, r.dev_cer, r.wall_secs
        );
    }
    println!("initial done in {:.1}s", t1.elapsed().as_secs_f64());
    let init_eval = trainer::greedy_cer(&initial.params, &data, &data.eval).unwrap();
    println!("initial eval CER {:.4}", init_eval);

    if let Ok(n) = std::env::var("SMOKE_SHOW").unwrap_or_default().parse::<usize>() {
        use cyclespeech::metrics::{score_corpus, Unit};
        let rows = trainer::greedy_decode_split(&initial.params, &data, &data.eval).unwrap();
        let refs: Vec<(String, String)> = data
            .eval
            .iter()
            .map(|u| (u.id.clone(), u.transcript.clone()))
            .collect();
        let report = score_corpus(&refs, &rows, Unit::Char).unwrap();
        let c = &report.corpus;
        println!(
            "eval S={} D={} I={} hits={} ref_len={}",
            c.substitutions, c.deletions, c.insertions, c.hits, c.ref_len
        );
        for (row, (_, reference)) in rows.iter().zip(&refs).take(n) {
            println!("  ref {:12} hyp {:12} ({})", reference, row.text, row.id);
        }
    }

    let variants: Vec<Variant> = std::env::var("SMOKE_VARIANTS")
        .unwrap_or_else(|_| "Baseline,Retrain-cyc+idt".into())
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().unwrap())
        .collect();
    for variant in variants {
        let t2 = Instant::now();
        let mut c = cfg.clone();
        c.variant = variant;
        let (ckpt, rlog) = trainer::retrain(&initial, &c, &data).unwrap();
        for r in &rlog.records {
            let comps: Vec<String> = r
                .components
                .iter()
                .map(|(c, v)| format!("{}={v:.3}", c.as_str()))
                .collect();
            println!(
                "{variant} epoch {:2} loss {:8.4} dev_cer {:.4} ({:.1}s) [{}]",
                r.epoch,
                r.total,
                r.dev_cer,
                r.wall_secs,
                comps.join(" ")
            );
        }
        let eval = trainer::greedy_cer(&ckpt.params, &data, &data.eval).unwrap();
        println!(
            "{variant}: eval CER {:.4} (initial {:.4}) in {:.1}s",
            eval,
            init_eval,
            t2.elapsed().as_secs_f64()
        );
    }
}
