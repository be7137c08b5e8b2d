// Scratch harness mirroring the acceptance battery exactly.
// cargo run --release -p attrface-core --example tune

use std::collections::BTreeMap;
use std::time::Instant;

use attrface_core::data::{generate, DatasetConfig};
use attrface_core::eval::{self, AttrOnlyOptions};
use attrface_core::model::EncoderConfig;
use attrface_core::rng;
use attrface_core::trainer::{run_experiment_suite, ModeSpec, TrainConfig};

const MODES: [&str; 8] = ["FR", "+P", "+N", "+A", "+PMN", "+PMNHA", "+PMN-A", "+PMN-H"];

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seeds: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(16);
    let batch: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(32);
    let lr: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0.02);

    let t_all = Instant::now();
    let mut verif: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut probe_a: Vec<(f64, f64)> = Vec::new();
    let mut hair_wins = 0;
    let mut all_max = 0;

    for seed in 0..seeds {
        let t0 = Instant::now();
        let dataset = generate(&DatasetConfig { seed, ..Default::default() }).unwrap();
        let base = TrainConfig {
            epochs,
            batch_size: batch,
            lr,
            lr_drop_epochs: vec![10, 14],
            early_stop_patience: epochs + 1,
            encoder: EncoderConfig::default(),
            val_pairs: 2000,
            seed,
            ..Default::default()
        };
        let specs: Vec<ModeSpec> = MODES.iter().map(|m| ModeSpec::Notation(m.to_string())).collect();
        let result = run_experiment_suite(&dataset, &specs, &base, 2).unwrap();
        print!("seed {seed}: ");
        for row in &result.rows {
            verif.entry(row.mode.clone()).or_default().push(row.fold_report.mean);
            print!("{}={:.4} ", row.mode, row.fold_report.mean);
        }
        println!("({:.0}s)", t0.elapsed().as_secs_f64());

        let eval_idx = dataset.eval_indices();
        let feats: Vec<Vec<f64>> = eval_idx.iter().map(|&i| dataset.samples[i].features.clone()).collect();
        let labels: Vec<Vec<u8>> = eval_idx.iter().map(|&i| dataset.samples[i].attributes.clone()).collect();
        let acc_idx: Vec<usize> = dataset.config.group_slices().into_iter().find(|(g, _)| g == "Accessories").unwrap().1;
        let probe_of = |mode: &str| {
            let row = result.rows.iter().find(|r| r.mode == mode).unwrap();
            let mut embeddings = Vec::new();
            for chunk in feats.chunks(256) {
                embeddings.extend(row.model.embed_batch(chunk).unwrap());
            }
            let mut acc = 0.0;
            for ps in 0..3u64 {
                acc += eval::linear_probe(&embeddings, &labels, &acc_idx, rng::derive(seed, &format!("probe:{ps}")))
                    .unwrap().group_mean.unwrap();
            }
            acc / 3.0
        };
        let pair = (probe_of("+PMN"), probe_of("+PMN-A"));
        println!("  probe A: +PMN={:.4} +PMN-A={:.4} margin={:+.4}", pair.0, pair.1, pair.0 - pair.1);
        probe_a.push(pair);

        let table = eval::attribute_only_table(&dataset, &AttrOnlyOptions { seed, ..Default::default() }).unwrap();
        let get = |l: &str| table.rows.iter().find(|r| r.label == l).map(|r| r.values[0]).unwrap();
        let all = get("All");
        hair_wins += usize::from(get("Hair") > get("Accessories"));
        all_max += usize::from(["Periocular", "Mouth", "Nose", "Hair", "Accessories"].iter().all(|g| all >= get(g)));
    }

    let mean = |m: &str| {
        let v = &verif[m];
        v.iter().sum::<f64>() / v.len() as f64
    };
    println!("\nmeans over {seeds} seeds ({:.0}s wall):", t_all.elapsed().as_secs_f64());
    for m in MODES {
        println!("  {m}: {:.4}", mean(m));
    }
    let (fr, p, n, a) = (mean("FR"), mean("+P"), mean("+N"), mean("+A"));
    let (pmn, pmnha, pmn_a, pmn_h) = (mean("+PMN"), mean("+PMNHA"), mean("+PMN-A"), mean("+PMN-H"));
    println!("C6: +P>FR {} | +N>FR {} | (+A-FR)<(+P-FR) {}", p > fr, n > fr, (a - fr) < (p - fr));
    println!("C7: +PMN-A>=+PMNHA {} | +PMN-H<+PMN {}", pmn_a >= pmnha, pmn_h < pmn);
    let mu = probe_a.iter().map(|x| x.0).sum::<f64>() / probe_a.len() as f64;
    let ms = probe_a.iter().map(|x| x.1).sum::<f64>() / probe_a.len() as f64;
    println!("C9: +PMN={mu:.4} +PMN-A={ms:.4} ok={}", ms <= mu);
    println!("C8: hair>acc {hair_wins}/{seeds}; all_max {all_max}/{seeds}");
}
