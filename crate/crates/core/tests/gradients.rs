mod common;

use std::collections::BTreeSet;

use common::{fixture, toy_model, update_example};
use tdst::autograd::{GradFault, Gradients, Graph, OpKind};
use tdst::gradcheck::{check_model_gradients, Coverage, DEFAULT_EPS};
use tdst::model::{DstModel, LossTerm, ReuseSpec, TrainingExample};
use tdst::train::Adam;
use tdst::{ParamId, Transformer};

// Larger than the training init so that attention gradients sit well above
// finite-difference round-off.
const CHECK_STD: f64 = 0.1;

fn grads(model: &DstModel<f64>, batch: &[TrainingExample], term: LossTerm) -> Gradients<f64> {
    let mut g = Graph::new(model.params());
    let loss = model.batch_term_loss(&mut g, batch, model.reuse(), term).unwrap();
    g.backward(loss).unwrap()
}

fn shared_ids(model: &DstModel<f64>) -> Vec<ParamId> {
    let specs = Transformer::param_specs(model.config());
    specs.iter().map(|s| model.params().id(&s.name).unwrap()).collect()
}

#[test]
fn every_loss_term_passes_gradient_check() {
    let fx = fixture(4, 3, 11);
    let model = toy_model::<f64>(&fx, ReuseSpec::best(), CHECK_STD, 5);
    let batch = vec![update_example(&model, &fx)];
    for term in [LossTerm::Sop, LossTerm::Vg, LossTerm::Joint] {
        let cov = Coverage::Sample { per_param: 12, seed: 3 };
        let r = check_model_gradients(&model, &batch, term, DEFAULT_EPS, cov, None).unwrap();
        assert!(r.max_relative_error < 1e-4, "{term:?}: {r:?}");
    }
}

#[test]
fn corrupted_backward_rule_is_caught() {
    let fx = fixture(4, 3, 11);
    let model = toy_model::<f64>(&fx, ReuseSpec::best(), CHECK_STD, 5);
    let batch = vec![update_example(&model, &fx)];
    let fault = GradFault { op: OpKind::Gelu, factor: 1.1 };
    let cov = Coverage::Sample { per_param: 6, seed: 3 };
    let r = check_model_gradients(&model, &batch, LossTerm::Joint, DEFAULT_EPS, cov, Some(fault)).unwrap();
    assert!(r.max_relative_error > 1e-3, "{r:?}");
}

#[test]
fn value_loss_alone_reaches_encoder_parameters() {
    let fx = fixture(4, 6, 21);
    let model = toy_model::<f64>(&fx, ReuseSpec::best(), 0.02, 8);
    let batch = vec![update_example(&model, &fx)];
    let vg = grads(&model, &batch, LossTerm::Vg);
    let ids = shared_ids(&model);
    let nonzero = ids
        .iter()
        .filter(|&&id| vg.get(id).is_some_and(|g| g.data().iter().any(|&v| v != 0.0)))
        .count();
    let frac = nonzero as f64 / ids.len() as f64;
    assert!(frac >= 0.99, "{nonzero}/{} shared tensors", ids.len());
}

#[test]
fn joint_gradient_is_sum_of_term_gradients() {
    let fx = fixture(4, 6, 21);
    let model = toy_model::<f64>(&fx, ReuseSpec::best(), 0.02, 8);
    let examples = model.build_examples(&fx.records).unwrap();
    let batch: Vec<TrainingExample> = examples.into_iter().take(4).collect();
    assert!(batch.iter().any(|e| e.num_updates() > 0));
    let (s, v, j) = (
        grads(&model, &batch, LossTerm::Sop),
        grads(&model, &batch, LossTerm::Vg),
        grads(&model, &batch, LossTerm::Joint),
    );
    let mut worst: f64 = 0.0;
    for id in model.params().ids() {
        let n = model.params().get(id).value().numel();
        let zeros = vec![0.0; n];
        let get = |g: &Gradients<f64>| g.get(id).map_or(zeros.clone(), |t| t.data().to_vec());
        let (gs, gv, gj) = (get(&s), get(&v), get(&j));
        for i in 0..n {
            let scale = gj[i].abs().max(gs[i].abs() + gv[i].abs());
            if scale > 0.0 {
                worst = worst.max((gj[i] - (gs[i] + gv[i])).abs() / scale);
            }
        }
    }
    assert!(worst <= 1e-6, "relative deviation {worst:e}");
}

#[test]
fn encoder_and_decoder_share_parameters() {
    let fx = fixture(4, 6, 21);
    let model = toy_model::<f64>(&fx, ReuseSpec::best(), 0.02, 8);
    let ex = update_example(&model, &fx);
    let name = |ids: Vec<ParamId>| -> BTreeSet<String> {
        ids.into_iter().map(|id| model.params().get(id).name.clone()).collect()
    };

    let mut g = Graph::new(model.params());
    let out = model.encode(&mut g, &ex.input).unwrap();
    let encoder = name(g.touched_params());
    let reused = model.select_reuse_states(&mut g, &out, &ex.input, model.reuse(), 0).unwrap();
    let mut g2 = Graph::new(model.params());
    let reused: Vec<_> = reused.iter().map(|&r| g2.input(g.value(r).clone())).collect();
    model.generate_value(&mut g2, &reused, 3).unwrap();
    let decoder = name(g2.touched_params());

    let head: BTreeSet<String> = model.sop_head_params().iter().map(|&id| model.params().get(id).name.clone()).collect();
    let enc_shared: BTreeSet<_> = encoder.difference(&head).cloned().collect();
    let dec_shared: BTreeSet<_> = decoder.iter().filter(|n| *n != "vg.out_bias").cloned().collect();
    assert_eq!(enc_shared, dec_shared);
    let all: BTreeSet<String> = shared_ids(&model).into_iter().map(|id| model.params().get(id).name.clone()).collect();
    assert_eq!(enc_shared, all);
}

#[test]
fn mutating_a_weight_changes_both_passes() {
    let fx = fixture(4, 6, 21);
    let mut model = toy_model::<f64>(&fx, ReuseSpec::best(), 0.02, 8);
    let ex = update_example(&model, &fx);
    let run = |m: &DstModel<f64>| {
        let mut g = Graph::new(m.params());
        let out = m.encode(&mut g, &ex.input).unwrap();
        let enc = g.value(out.slot_logits).clone();
        let mut g2 = Graph::new(m.params());
        let reused: Vec<_> = out.layer_states[..m.config().num_layers]
            .iter()
            .map(|&l| g2.input(g.value(l).clone()))
            .collect();
        let h = m.decode(&mut g2, &reused, &[tdst::data::SPECIAL.bos]).unwrap();
        (enc, g2.value(h).clone())
    };
    let (e0, d0) = run(&model);
    let id = model.params().id("layer.2.ffn.w1").unwrap();
    model.params_mut().get_mut(id).value_mut().data_mut()[0] += 0.5;
    let (e1, d1) = run(&model);
    assert_ne!(e0, e1);
    assert_ne!(d0, d1);
}

#[test]
fn one_optimizer_covers_every_parameter() {
    let fx = fixture(4, 3, 11);
    let model = toy_model::<f32>(&fx, ReuseSpec::best(), 0.02, 1);
    let adam = Adam::new(model.params());
    let all: Vec<ParamId> = model.params().ids().collect();
    assert_eq!(adam.param_ids(), all.as_slice());
}
