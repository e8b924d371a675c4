use proptest::prelude::*;
use tfcodit_core::diffusion::{build_mask, forward_noise, Denoiser, DenoiserConfig, NoiseSchedule};
use tfcodit_core::params::{Graph, ParamStore};
use tfcodit_core::preprocess::{denormalize, normalize, RawDailyRecord};
use tfcodit_core::rng::{standard_normal, stream};
use tfcodit_core::sampler::{sample_latent, NoisePredictor, SamplerConfig, SamplerMethod};
use tfcodit_core::signal::{dwt_decompose, idwt_reconstruct, Contract, DecompositionConfig, TimeSeries};
use tfcodit_core::tensor::Matrix;
use tfcodit_core::Result;

fn series_strategy() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (0usize..5, 1usize..=3).prop_flat_map(|(e, j)| {
        let t = 8usize << e;
        (Just(t), Just(j), proptest::collection::vec(-1e3f64..1e3, 8 * t))
    })
}

fn record(date: usize, open: f64, ret: f64, spread: f64, volume: f64, oi: f64) -> RawDailyRecord {
    let close = open * (1.0 + ret);
    RawDailyRecord {
        date: format!("d{date:04}"),
        open,
        high: open.max(close) + spread,
        low: (open.min(close) - spread).max(1e-3),
        close,
        settle: (open + close) / 2.0,
        value: volume * open / 100.0,
        volume,
        open_interest: oi,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn wavelet_round_trip_and_energy((t, j, data) in series_strategy()) {
        let s = TimeSeries::new(Matrix::from_vec(8, t, data), Contract::T, true).unwrap();
        let cfg = DecompositionConfig::new(j);
        let grid = dwt_decompose(&s, &cfg).unwrap();
        let back = idwt_reconstruct(&grid, &cfg).unwrap();
        let scale = s.values().as_slice().iter().fold(1.0f64, |a, x| a.max(x.abs()));
        prop_assert!(back.max_abs_diff(s.values()) / scale < 1e-12);
        for c in 0..8 {
            let e_time: f64 = s.channel(c).iter().map(|x| x * x).sum();
            let e_wave: f64 = grid.native_rows(c).iter().flatten().map(|x| x * x).sum();
            prop_assert!((e_time - e_wave).abs() <= 1e-9 * e_time.max(1e-300));
        }
    }

    #[test]
    fn normalization_round_trip(
        days in proptest::collection::vec((-0.02f64..0.02, 0.0f64..0.5, 0u8..4, 1.0f64..1e5, -0.05f64..0.05), 2..60),
        open0 in 50.0f64..150.0,
    ) {
        let mut open = open0;
        let mut oi = 2e4;
        let mut recs = Vec::new();
        for (i, &(ret, spread, kind, vol, doi)) in days.iter().enumerate() {
            // kind 0: flat day, kind 1: no trading
            let ret = if kind == 0 { 0.0 } else { ret };
            let vol = if kind == 1 { 0.0 } else { vol };
            recs.push(record(i, open, ret, spread, vol, oi));
            open *= 1.0 + ret * 0.5;
            oi *= 1.0 + doi;
        }
        let (series, state) = normalize(&recs, Contract::TF).unwrap();
        let back = denormalize(&series, &state).unwrap();
        prop_assert_eq!(back.len(), recs.len() - 1);
        for (a, b) in recs[1..].iter().zip(&back) {
            prop_assert_eq!(&a.date, &b.date);
            for (x, y) in a.channels().iter().zip(b.channels()) {
                prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0), "{} vs {}", x, y);
            }
        }
    }
}

/// Column `j` is reachable from row `i` when a softmax over random scores
/// plus the mask puts positive weight on it.
fn reachable(mask: &Matrix, seed: u64) -> Vec<Vec<bool>> {
    let scores = standard_normal(&mut stream(seed, 0), mask.rows(), mask.cols());
    (0..mask.rows())
        .map(|i| {
            let logits: Vec<f64> = (0..mask.cols()).map(|j| scores.get(i, j) + mask.get(i, j)).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = w.iter().sum();
            w.iter().map(|x| x / z > 0.0).collect()
        })
        .collect()
}

#[test]
fn mask_matches_reachability_predicate() {
    for total in 1..=12usize {
        for n in 0..=total {
            let m = total - n;
            let mask = build_mask(n, m);
            let seen = reachable(&mask, (n * 13 + m) as u64);
            for i in 0..total {
                for j in 0..total {
                    let i_text = i < n;
                    let j_text = j < n;
                    let want = if i_text { j_text && j <= i } else { true };
                    assert_eq!(seen[i][j], want, "N={n} M={m} ({i},{j})");
                }
            }
        }
    }
}

fn random_denoiser() -> (Denoiser, ParamStore) {
    let cfg = DenoiserConfig {
        layers: 2,
        width: 16,
        heads: 2,
        max_text: 10,
        n_freq: 2,
        n_time: 4,
        latent_dim: 4,
        time_embed: 8,
        ffn_mult: 2,
        vocab_size: 20,
        ..Default::default()
    };
    let mut store = ParamStore::new();
    let model = Denoiser::new(cfg, &mut store, &mut stream(21, 0)).unwrap();
    // spread the weights so every path carries signal
    let ids: Vec<_> = store.ids().collect();
    let mut rng = stream(22, 0);
    for id in ids {
        let (r, c) = store.value(id).shape();
        *store.value_mut(id) = standard_normal(&mut rng, r, c).map(|x| x * 0.5);
    }
    (model, store)
}

fn hidden(model: &Denoiser, store: &ParamStore, z: &Matrix, tokens: &[u32]) -> Vec<Matrix> {
    let mut g = Graph::new(store);
    let trace = model.forward(&mut g, z, 300, tokens).unwrap();
    trace.hidden.iter().map(|h| g.value(*h).clone()).collect()
}

#[test]
fn text_perturbation_is_causal_at_every_layer() {
    let (model, store) = random_denoiser();
    let z = standard_normal(&mut stream(23, 0), 8, 4);
    let base: Vec<u32> = vec![4, 9, 5, 17, 8, 12, 6];
    let n = base.len();
    let reference = hidden(&model, &store, &z, &base);
    for k in 0..n {
        let mut alt = base.clone();
        alt[k] = 19;
        let changed = hidden(&model, &store, &z, &alt);
        for (layer, (a, b)) in reference.iter().zip(&changed).enumerate() {
            for row in 0..k {
                assert_eq!(a.row(row), b.row(row), "layer {layer} text row {row} moved when token {k} changed");
            }
            assert_ne!(a.row(k), b.row(k));
            assert!((n..a.rows()).any(|r| a.row(r) != b.row(r)), "latent rows ignore token {k}");
        }
    }
    let z2 = z.map(|x| x + 0.3);
    let moved = hidden(&model, &store, &z2, &base);
    for (a, b) in reference.iter().zip(&moved) {
        for row in 0..n {
            assert_eq!(a.row(row), b.row(row));
        }
    }
}

#[test]
fn forward_variance_matches_monte_carlo() {
    let schedule = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
    let var0: f64 = 2.5;
    let z0 = standard_normal(&mut stream(30, 0), 100, 100).map(|x| x * var0.sqrt());
    let v0 = sample_var(z0.as_slice());
    for t in [250, 500, 1000] {
        let eps = standard_normal(&mut stream(31, t as u64), 100, 100);
        let zt = forward_noise(&z0, t, &eps, &schedule).unwrap();
        let ab = schedule.alpha_bar(t);
        let want = ab * v0 + (1.0 - ab);
        let got = sample_var(zt.as_slice());
        assert!((got - want).abs() / want < 0.05, "t={t}: {got} vs {want}");
    }
}

fn sample_var(x: &[f64]) -> f64 {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() - 1) as f64
}

struct Zero;

impl NoisePredictor for Zero {
    fn predict(&self, z: &Matrix, _t: usize, _c: &[u32]) -> Result<Matrix> {
        Ok(Matrix::zeros(z.rows(), z.cols()))
    }
}

#[test]
fn ancestral_zero_predictor_variance() {
    let schedule = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
    let cfg = SamplerConfig { method: SamplerMethod::AncestralDdpm, num_steps: 50, seed: 4, guidance_scale: 0.0 };
    let out = sample_latent(&Zero, &[], (100, 100), &cfg, &schedule, 0).unwrap();
    // with ε̂ = 0 each step scales by 1/√α_t and adds posterior noise β̃_t
    let mut want = 1.0;
    for t in (1..=50).rev() {
        want /= schedule.alpha(t);
        if t > 1 {
            want += (1.0 - schedule.alpha_bar(t - 1)) / (1.0 - schedule.alpha_bar(t)) * schedule.beta(t);
        }
    }
    let got = sample_var(out.as_slice());
    assert!((got - want).abs() / want < 0.05, "{got} vs {want}");
}
