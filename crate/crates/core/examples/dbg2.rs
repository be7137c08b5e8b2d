// Scratch: suppression dynamics at varying step budgets.
use attrface_core::data::{generate, DatasetConfig};
use attrface_core::eval;
use attrface_core::model::EncoderConfig;
use attrface_core::rng;
use attrface_core::trainer::{build_model, train, ModeSpec, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let batch: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(64);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(16);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0.03);

    let mut cfg = DatasetConfig::default();
    cfg.seed = std::env::var("ATF_SEED").ok().and_then(|v| v.parse().ok()).unwrap_or(0);
    let dataset = generate(&cfg).unwrap();
    let eval_idx = dataset.eval_indices();
    let feats: Vec<Vec<f64>> = eval_idx.iter().map(|&i| dataset.samples[i].features.clone()).collect();
    let labels: Vec<Vec<u8>> = eval_idx.iter().map(|&i| dataset.samples[i].attributes.clone()).collect();
    let acc_idx: Vec<usize> = dataset.config.group_slices().into_iter().find(|(g, _)| g == "Accessories").unwrap().1;

    for mode in ["FR", "+PMN", "-A", "+PMN-A"] {
        let config = TrainConfig {
            epochs,
            batch_size: batch,
            lr,
            lr_drop_epochs: {
                let d: Vec<usize> = std::env::var("ATF_DROPS").unwrap_or_default()
                    .split(',').filter_map(|x| x.parse().ok()).collect();
                if d.is_empty() { vec![epochs * 2 / 3, epochs - 2] } else { d }
            },
            early_stop_patience: epochs + 1,
            encoder: EncoderConfig::default(),
            val_pairs: 2000,
            modes: ModeSpec::Notation(mode.into()),
            seed: cfg.seed,
            ..Default::default()
        };
        let model = build_model(&dataset, &config).unwrap();
        let trained = train(model, &dataset, &config).unwrap();
        let mut embeddings = Vec::new();
        for chunk in feats.chunks(256) {
            embeddings.extend(trained.model.embed_batch(chunk).unwrap());
        }
        let mut acc = 0.0;
        for ps in 0..3u64 {
            acc += eval::linear_probe(&embeddings, &labels, &acc_idx, rng::derive(cfg.seed, &format!("probe:{ps}"))).unwrap().group_mean.unwrap();
        }
        let last = trained.history.epochs.last().unwrap();
        let first = trained.history.epochs.first().unwrap();
        println!(
            "{mode:8} probeA={:.4} val={:.4} l_adv: {:?} -> {:?}",
            acc / 3.0, last.val_metric,
            first.l_adv.map(|v| (v * 1e3).round() / 1e3),
            last.l_adv.map(|v| (v * 1e3).round() / 1e3),
        );
    }
}
