//! Finite-difference checks of the combined objective through the real
//! model wiring, for head combinations without a reversal layer (the
//! reversal case has its own sign-aware checks).

use attrface_core::autodiff::{finite_difference_check, FdCheckConfig, Parameter, Tape, TensorId};
use attrface_core::data::{generate, DatasetConfig};
use attrface_core::losses::{self, GroupLossInput, LossWeights};
use attrface_core::model::{EncoderConfig, ModelBinding, MultiTaskModel};
use attrface_core::trainer::{build_model, ModeSpec, TrainConfig};

fn binding_from_ids(model: &MultiTaskModel, ids: &[TensorId]) -> ModelBinding {
    let mut it = ids.iter().copied();
    let mut layer_ids = Vec::new();
    for _ in &model.encoder.layers {
        let w = it.next().unwrap();
        let b = it.next().unwrap();
        layer_ids.push((w, b));
    }
    let proto_id = it.next().unwrap();
    let mut head_ids = Vec::new();
    for _ in &model.attribute_heads {
        let w = it.next().unwrap();
        let b = it.next().unwrap();
        head_ids.push((w, b));
    }
    ModelBinding {
        layer_ids,
        proto_id,
        head_ids,
    }
}

fn check_modes(modes: &str) {
    let dcfg = DatasetConfig {
        num_identities: 8,
        images_per_identity: 3,
        latent_dim: 6,
        input_dim: 16,
        seed: 9,
        ..Default::default()
    };
    let dataset = generate(&dcfg).unwrap();
    let config = TrainConfig {
        modes: ModeSpec::Notation(modes.to_string()),
        encoder: EncoderConfig {
            input_dim: 16,
            hidden_dims: vec![10],
            embedding_dim: 8,
            seed: 3,
        },
        seed: 3,
        ..Default::default()
    };
    let model = build_model(&dataset, &config).unwrap();
    let weights = LossWeights::default();
    let batch: Vec<usize> = dataset.train_indices()[..4].to_vec();
    let group_slices = dataset.config.group_slices();

    let params: Vec<Parameter> = model.params().into_iter().cloned().collect();
    let report = finite_difference_check(
        &params,
        |tape: &mut Tape, ids: &[TensorId]| {
            let binding = binding_from_ids(&model, ids);
            let mut flat = Vec::new();
            let mut labels = Vec::new();
            for &i in &batch {
                flat.extend_from_slice(&dataset.samples[i].features);
                labels.push(dataset.samples[i].identity);
            }
            let x = tape.constant(flat, vec![batch.len(), dcfg.input_dim])?;
            let z = model.encode(tape, &binding, x)?;
            let cosines = model.identity_logits(tape, &binding, z)?;
            let l_id =
                losses::cosface_loss(tape, cosines, &labels, weights.margin_m, weights.scale_r)?;

            let mut data = Vec::new();
            for head in &model.attribute_heads {
                let indices = &group_slices
                    .iter()
                    .find(|(g, _)| *g == head.group_name)
                    .unwrap()
                    .1;
                let logits = model.attribute_logits(tape, &binding, z, &head.group_name)?;
                let mut targets = Vec::new();
                for &i in &batch {
                    for &a in indices.iter() {
                        targets.push(f64::from(dataset.samples[i].attributes[a]));
                    }
                }
                let mask = vec![true; targets.len()];
                data.push((head.group_name.clone(), logits, targets, mask));
            }
            let inputs: Vec<GroupLossInput> = data
                .iter()
                .map(|(g, logits, targets, mask)| GroupLossInput {
                    group: g,
                    logits: *logits,
                    targets,
                    mask,
                })
                .collect();
            let l_attr = if inputs.is_empty() {
                None
            } else {
                Some(losses::attribute_prediction_loss(tape, &inputs)?)
            };
            losses::total_loss(tape, l_id, l_attr, None, &weights)
        },
        &FdCheckConfig {
            tolerance: 1e-4,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(
        report.pass,
        "{modes}: max rel err {} ({:?})",
        report.max_rel_err,
        report
            .per_param
            .iter()
            .map(|p| (p.name.clone(), p.max_rel_err))
            .collect::<Vec<_>>()
    );
}

#[test]
fn identity_only_objective_matches_finite_differences() {
    check_modes("FR");
}

#[test]
fn single_group_prediction_objective_matches_finite_differences() {
    check_modes("+H");
}

#[test]
fn multi_group_prediction_objective_matches_finite_differences() {
    check_modes("+PMNHA");
}
