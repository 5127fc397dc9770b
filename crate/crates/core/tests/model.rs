use volflow::latent::LatentBlock;
use volflow::model::*;
use volflow::text::{embed_report, Finding, Report, TextEmbedding};
use volflow::Error;
use volflow_tensor::Graph;

/// Tiny at 8×8 latents (64×64 phantoms), frozen.
const TINY_PARAMS: usize = 372_512;

/// Independent count: patch embedding, timestep MLP, text projection, adaLN
/// blocks, final layer, skip gains and positional tables.
fn count_by_hand(d: usize, depth: usize, spatial_tokens: usize) -> usize {
    let lin = |i: usize, o: usize| i * o + o;
    let block = lin(d, 6 * d) + lin(d, 3 * d) + lin(d, d) + lin(d, 4 * d) + lin(4 * d, d);
    lin(256, d) + lin(256, d) + lin(d, d) + lin(256, d)
        + 2 * depth * block
        + lin(d, 2 * d)
        + lin(d, 128)
        + lin(d, 32)
        + 8 * d
        + spatial_tokens * d
}

fn block(seed: u32) -> LatentBlock {
    let data = (0..16 * 16 * 16).map(|i| (((i as u32).wrapping_mul(2654435761) ^ seed) % 1000) as f32 / 500.0 - 1.0).collect();
    LatentBlock::new(4, 4, data).unwrap()
}

fn text(f: Finding) -> TextEmbedding {
    embed_report(&Report::new([f], 64).unwrap(), 1)
}

/// Trained-looking parameters: every tensor filled with small seeded noise.
fn perturbed(cfg: &ModelConfig) -> ModelParams {
    let mut p = ModelParams::init(cfg, 3).unwrap();
    for (k, t) in p.tensors.iter_mut() {
        let salt = k.len() as u32;
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v += ((i as u32 * 7919 + salt * 104729) % 997) as f32 / 997.0 * 0.04 - 0.02;
        }
    }
    p
}

#[test]
fn tiny_parameter_count_is_frozen() {
    let cfg = ModelConfig::new(ModelSize::Tiny, 8, 8);
    assert_eq!(count_by_hand(64, 2, 16), TINY_PARAMS);
    assert_eq!(cfg.param_count(), TINY_PARAMS);
    assert_eq!(ModelParams::init(&cfg, 0).unwrap().param_count(), TINY_PARAMS);
}

#[test]
fn size_ladder_lands_near_targets() {
    for (size, target) in [(ModelSize::S, 36e6), (ModelSize::B, 146e6), (ModelSize::L, 512e6)] {
        let cfg = ModelConfig::new(size, 32, 32);
        let (d, _, depth) = size.dims();
        assert_eq!(cfg.param_count(), count_by_hand(d, depth, 256));
        let rel = (cfg.param_count() as f64 - target).abs() / target;
        assert!(rel < 0.10, "{size}: {} params", cfg.param_count());
    }
}

#[test]
fn fresh_model_predicts_zero_velocity() {
    let p = ModelParams::init(&ModelConfig::new(ModelSize::Tiny, 4, 4), 1).unwrap();
    let (x, c) = (block(1), block(2));
    let e = text(Finding::Nodule);
    let v = p.velocity(&[&x, &x], &[0.3, 0.9], &[&c, &c], &[&e, &e]).unwrap();
    assert!(v.iter().all(|b| b.data().iter().all(|&z| z == 0.0)));
    assert_eq!(v[0].shape(), x.shape());
}

#[test]
fn batch_elements_do_not_interact() {
    let p = perturbed(&ModelConfig::new(ModelSize::Tiny, 4, 4));
    let xs = [block(1), block(2), block(3)];
    let cs = [block(4), block(5), block(6)];
    let es = [text(Finding::Nodule), text(Finding::Normal), text(Finding::Fibrosis)];
    let ts = [0.1, 0.5, 0.8];
    let all = p
        .velocity(&xs.iter().collect::<Vec<_>>(), &ts, &cs.iter().collect::<Vec<_>>(), &es.iter().collect::<Vec<_>>())
        .unwrap();
    assert!(all[0].data().iter().any(|&z| z != 0.0));
    let order = [2, 0, 1];
    let perm = p
        .velocity(
            &order.map(|i| &xs[i]),
            &order.map(|i| ts[i]),
            &order.map(|i| &cs[i]),
            &order.map(|i| &es[i]),
        )
        .unwrap();
    for (k, &i) in order.iter().enumerate() {
        let diff = perm[k].data().iter().zip(all[i].data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(diff < 1e-5, "element {i} changed by {diff}");
    }
}

#[test]
fn output_shape_matches_input_for_tiny_and_b() {
    for size in [ModelSize::Tiny, ModelSize::B] {
        let p = ModelParams::init(&ModelConfig::new(size, 2, 4), 0).unwrap();
        let x = LatentBlock::zeros(2, 4);
        let v = p.velocity(&[&x], &[0.5], &[&x], &[&text(Finding::Normal)]).unwrap();
        assert_eq!(v[0].shape(), [16, 16, 2, 4]);
    }
}

#[test]
fn shape_errors_are_reported() {
    let p = ModelParams::init(&ModelConfig::new(ModelSize::Tiny, 4, 4), 0).unwrap();
    let (x, wrong) = (block(1), LatentBlock::zeros(2, 2));
    let e = text(Finding::Normal);
    assert!(matches!(p.velocity(&[&wrong], &[0.5], &[&wrong], &[&e]), Err(Error::Shape(_))));
    assert!(matches!(p.velocity(&[&x], &[0.5, 0.2], &[&x], &[&e]), Err(Error::Shape(_))));
    assert!(p.velocity(&[&x], &[0.5], &[&x, &x], &[&e]).is_err());
    assert!(ModelParams::init(&ModelConfig::new(ModelSize::Tiny, 3, 4), 0).is_err());
}

#[test]
fn patchify_round_trips() {
    let mut g = Graph::<f64>::new();
    let data: Vec<f64> = (0..2 * 16 * 3 * 4 * 6).map(|i| i as f64).collect();
    let x = g.constant(volflow_tensor::Tensor::new(vec![2, 16, 3, 4, 6], data.clone()).unwrap());
    let p = patchify(&mut g, x).unwrap();
    assert_eq!(g.shape(p), [2, 8 * 2 * 3, 3 * 8]);
    let back = unpatchify(&mut g, p, 16, 3, 4, 6).unwrap();
    assert_eq!(g.value(back).data(), data.as_slice());
}

#[test]
fn init_is_seeded() {
    let cfg = ModelConfig::new(ModelSize::Tiny, 4, 4);
    assert_eq!(ModelParams::init(&cfg, 4).unwrap(), ModelParams::init(&cfg, 4).unwrap());
    assert_ne!(ModelParams::init(&cfg, 4).unwrap(), ModelParams::init(&cfg, 5).unwrap());
}
