use tfcodit_core::autodiff::Var;
use tfcodit_core::diffusion::{diffusion_loss_with, draw_noise, Denoiser, DenoiserConfig, DiffusionExample, NoiseSchedule};
use tfcodit_core::gradcheck::{check_gradients, pass_fraction};
use tfcodit_core::params::{Graph, ParamStore};
use tfcodit_core::rng::{standard_normal, stream};
use tfcodit_core::signal::{dwt_decompose, Contract, DecompositionConfig, TimeSeries, WaveletGrid};
use tfcodit_core::uvae::{UVae, UVaeConfig};

const TOL: f64 = 1e-4;
const H: f64 = 1e-5;
const FLOOR: f64 = 1e-8;

fn toy_vae() -> UVaeConfig {
    UVaeConfig {
        steps: 8,
        level: 1,
        width: 8,
        encoder_heads: vec![2, 2, 2],
        decoder_heads: vec![2, 2, 2],
        patch_freq: 2,
        patch_time: 2,
        ..UVaeConfig::for_horizon(8)
    }
}

fn grid(cfg: &UVaeConfig, seed: u64) -> WaveletGrid {
    let mut rng = stream(seed, 0);
    let s = TimeSeries::new(standard_normal(&mut rng, 8, cfg.steps), Contract::T, true).unwrap();
    dwt_decompose(&s, &DecompositionConfig::new(cfg.level)).unwrap()
}

/// Redraws every parameter from `N(0, std²)` so attention is far from uniform.
fn spread(store: &mut ParamStore, seed: u64, std: f64) {
    let ids: Vec<_> = store.ids().collect();
    let mut rng = stream(seed, 99);
    for id in ids {
        let (r, c) = store.value(id).shape();
        *store.value_mut(id) = standard_normal(&mut rng, r, c).map(|x| x * std);
    }
}

fn report(name: &str, frac: f64) {
    println!("{name}: {:.4} of entries within {TOL}", frac);
}

#[test]
fn encoder_layer_gradients() {
    let cfg = toy_vae();
    let mut store = ParamStore::new();
    let model = UVae::new(cfg.clone(), &mut store, &mut stream(1, 0)).unwrap();
    let h0 = model.patchify(&store, &grid(&cfg, 2)).unwrap();
    let mut rng = stream(3, 0);
    let probe = standard_normal(&mut rng, 4, 8);
    let checks = check_gradients(&store, H, FLOOR, usize::MAX, |g: &mut Graph<'_>| -> Var {
        let h = g.constant(h0.clone());
        let (h1, _) = model.encoder_layer(g, 1, h);
        let w = g.constant(probe.clone());
        let prod = g.tape.mul(h1, w);
        g.tape.sum(prod)
    });
    let frac = pass_fraction(&checks, TOL);
    report("lqa layer", frac);
    assert!(frac >= 0.99);
}

#[test]
fn elbo_gradients() {
    let cfg = toy_vae();
    let mut store = ParamStore::new();
    let model = UVae::new(cfg.clone(), &mut store, &mut stream(4, 0)).unwrap();
    spread(&mut store, 4, 0.7);
    let w = grid(&cfg, 5);
    let eps = standard_normal(&mut stream(6, 0), 1, 8);
    let checks = check_gradients(&store, H, FLOOR, usize::MAX, |g| model.loss_graph(g, &w, &eps).unwrap().0);
    let frac = pass_fraction(&checks, TOL);
    report("elbo", frac);
    assert!(frac >= 0.99);
}

#[test]
fn diffusion_loss_gradients() {
    let cfg = DenoiserConfig {
        layers: 2,
        width: 16,
        heads: 2,
        max_text: 8,
        n_freq: 2,
        n_time: 2,
        latent_dim: 4,
        time_embed: 8,
        ffn_mult: 2,
        vocab_size: 12,
        freeze_body: false,
        p_uncond: 0.0,
        latent_scale: 1.0,
    };
    let mut store = ParamStore::new();
    let model = Denoiser::new(cfg, &mut store, &mut stream(7, 0)).unwrap();
    let schedule = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
    let batch = vec![
        DiffusionExample { z0: standard_normal(&mut stream(8, 0), 4, 4), condition: vec![4, 5, 6] },
        DiffusionExample { z0: standard_normal(&mut stream(8, 1), 4, 4), condition: vec![] },
    ];
    let draws = draw_noise(&mut stream(9, 0), &batch, &schedule, 0.0);
    let checks = check_gradients(&store, H, FLOOR, usize::MAX, |g| diffusion_loss_with(g, &model, &batch, &draws, &schedule).unwrap());
    let frac = pass_fraction(&checks, TOL);
    report("diffusion", frac);
    assert!(frac >= 0.99);
}
