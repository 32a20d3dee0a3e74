mod common;

use common::{grammar, log_softmax, medium_checkpoint, reference_logits, tiny_checkpoint};
use gapscope::das::{
    apply_direction, intervene, intervened_final_logits, loss_and_grad, random_direction, train_direction_cached,
    DasDirection, DasTrainConfig, InterventionSite, PairCache, Readout,
};
use gapscope::grammar::{MinimalPair, Split, TemplateVariant};
use gapscope::model::ModelCheckpoint;
use proptest::prelude::*;

fn pairs(variant: TemplateVariant, n: usize, seed: u64) -> Vec<MinimalPair> {
    grammar().generate_pairs(variant, n, seed, Split::Train).unwrap()
}

/// Mean source-label cross-entropy after intervening along an arbitrary
/// (not necessarily unit) `a`, computed by the f64 reference model.
fn reference_loss(ckpt: &ModelCheckpoint, batch: &[MinimalPair], site: InterventionSite, a: &[f64]) -> f64 {
    let mut total = 0.0;
    for p in batch {
        let (_, base) = ckpt.forward_with_cache(&p.base_tokens).unwrap();
        let (_, source) = ckpt.forward_with_cache(&p.source_tokens).unwrap();
        let pb = p.base_slots[site.slot];
        let hb = base.get(site.layer, pb);
        let hs = source.get(site.layer, p.source_slots[site.slot]);
        let proj: f64 = a.iter().zip(hs.iter().zip(hb)).map(|(ai, (s, b))| ai * (*s as f64 - *b as f64)).sum();
        let patched: Vec<f32> = hb.iter().zip(a).map(|(b, ai)| (*b as f64 + ai * proj) as f32).collect();
        let logits = reference_logits(ckpt, &p.base_tokens, Some((site.layer, pb, &patched)));
        let last = logits.last().unwrap();
        total -= log_softmax(last)[p.source_label as usize];
    }
    total / batch.len() as f64
}

#[test]
fn gradient_matches_central_differences() {
    let ckpt = tiny_checkpoint();
    let batch = pairs(TemplateVariant::WH_ANIMATE, 20, 5);
    let cache = PairCache::build(ckpt, &batch).unwrap();
    let idx: Vec<usize> = (0..batch.len()).collect();
    let h = 1e-3;
    let (mut checked, mut good) = (0, 0);
    let sites = (0..=ckpt.config.n_layers)
        .flat_map(|l| (0..batch[0].base_slots.len()).map(move |s| InterventionSite::new(l, s)));
    for (k, site) in sites.enumerate() {
        let a = random_direction(ckpt.config.d_model, k as u64);
        let (_, grad) = loss_and_grad(ckpt, &cache, &idx, site, &a, Readout::FinalPosition).unwrap();
        let a64: Vec<f64> = a.iter().map(|&v| v as f64).collect();
        for i in 0..a.len() {
            if grad[i].abs() <= 1e-6 {
                continue;
            }
            let mut plus = a64.clone();
            plus[i] += h;
            let mut minus = a64.clone();
            minus[i] -= h;
            let fd = (reference_loss(ckpt, &batch, site, &plus) - reference_loss(ckpt, &batch, site, &minus)) / (2.0 * h);
            let rel = (grad[i] as f64 - fd).abs() / fd.abs().max(grad[i].abs() as f64);
            checked += 1;
            if rel < 1e-2 {
                good += 1;
            }
        }
    }
    assert!(checked > 0);
    assert!(good as f64 >= 0.95 * checked as f64, "{good}/{checked} coordinates within 1e-2");
}

#[test]
fn loss_value_matches_reference() {
    let ckpt = tiny_checkpoint();
    let batch = pairs(TemplateVariant::TOPIC_INANIMATE, 4, 1);
    let cache = PairCache::build(ckpt, &batch).unwrap();
    let site = InterventionSite::new(1, 2);
    let a = random_direction(ckpt.config.d_model, 4);
    let (loss, _) = loss_and_grad(ckpt, &cache, &[0, 1, 2, 3], site, &a, Readout::FinalPosition).unwrap();
    let want = reference_loss(ckpt, &batch, site, &a.iter().map(|&v| v as f64).collect::<Vec<_>>());
    assert!((loss as f64 - want).abs() < 1e-4, "{loss} vs {want}");
}

#[test]
fn training_lowers_loss_and_keeps_unit_norm() {
    let ckpt = medium_checkpoint();
    let before = ckpt.clone();
    let cache = PairCache::build(ckpt, &pairs(TemplateVariant::WH_ANIMATE, 100, 2)).unwrap();
    let cfg = DasTrainConfig {
        seed: 3,
        ..DasTrainConfig::default()
    };
    let mut improved = 0;
    let sites = [InterventionSite::new(2, 1), InterventionSite::new(3, 2), InterventionSite::new(4, 5)];
    for site in sites {
        let dir = train_direction_cached(ckpt, &cache, site, &cfg).unwrap();
        let norm: f32 = dir.a.iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5);
        if dir.meta.final_loss < dir.meta.initial_loss {
            improved += 1;
        }
    }
    assert_eq!(improved, sites.len());
    assert_eq!(&before, ckpt, "model weights must stay frozen");
}

#[test]
fn training_is_deterministic_in_seed() {
    let ckpt = tiny_checkpoint();
    let cache = PairCache::build(ckpt, &pairs(TemplateVariant::WH_INANIMATE, 30, 2)).unwrap();
    let site = InterventionSite::new(1, 3);
    let cfg = DasTrainConfig {
        batch_size: 10,
        steps: 15,
        seed: 1,
        ..DasTrainConfig::default()
    };
    let a = train_direction_cached(ckpt, &cache, site, &cfg).unwrap();
    let b = train_direction_cached(ckpt, &cache, site, &cfg).unwrap();
    assert_eq!(a, b);
    let c = train_direction_cached(ckpt, &cache, site, &DasTrainConfig { seed: 2, ..cfg }).unwrap();
    assert_ne!(a.a, c.a);
}

#[test]
fn batched_logits_match_single_pair_paths() {
    let ckpt = tiny_checkpoint();
    let batch = pairs(TemplateVariant::TOPIC_ANIMATE, 12, 8);
    let cache = PairCache::build(ckpt, &batch).unwrap();
    let site = InterventionSite::new(1, 5);
    let a = random_direction(ckpt.config.d_model, 2);
    let all = intervened_final_logits(ckpt, &cache, site, &a).unwrap();
    let dir = DasDirection {
        a: a.clone(),
        site,
        meta: train_direction_cached(ckpt, &cache, site, &DasTrainConfig { batch_size: 4, steps: 1, ..Default::default() })
            .unwrap()
            .meta,
    };
    for (i, p) in batch.iter().enumerate() {
        let single = cache.intervened_final(ckpt, i, site, &a).unwrap();
        let (_, full) = apply_direction(ckpt, p, &dir).unwrap();
        let last = full.row(full.rows() - 1);
        for ((x, y), z) in all[i].iter().zip(&single).zip(last) {
            assert!((x - y).abs() < 1e-5 && (y - z).abs() < 1e-5);
        }
    }
}

#[test]
fn direction_file_round_trip() {
    let ckpt = tiny_checkpoint();
    let cache = PairCache::build(ckpt, &pairs(TemplateVariant::WH_ANIMATE, 10, 2)).unwrap();
    let cfg = DasTrainConfig {
        batch_size: 5,
        steps: 3,
        ..Default::default()
    };
    let dir = train_direction_cached(ckpt, &cache, InterventionSite::new(0, 0), &cfg).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("d.json");
    dir.save(&path).unwrap();
    assert_eq!(DasDirection::load(&path).unwrap(), dir);
}

#[test]
fn invalid_site_is_rejected() {
    let ckpt = tiny_checkpoint();
    let cache = PairCache::build(ckpt, &pairs(TemplateVariant::WH_ANIMATE, 10, 2)).unwrap();
    let cfg = DasTrainConfig {
        batch_size: 5,
        steps: 3,
        ..Default::default()
    };
    assert!(train_direction_cached(ckpt, &cache, InterventionSite::new(3, 0), &cfg).is_err());
    assert!(train_direction_cached(ckpt, &cache, InterventionSite::new(0, 6), &cfg).is_err());
}

fn unit(v: Vec<f32>) -> Vec<f32> {
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn triple(d: usize) -> impl Strategy<Value = (Vec<f32>, Vec<f32>, Vec<f32>)> {
    (
        prop::collection::vec(-3.0f32..3.0, d),
        prop::collection::vec(-3.0f32..3.0, d),
        prop::collection::vec(-1.0f32..1.0, d).prop_filter("non-zero", |v| v.iter().any(|x| x.abs() > 0.1)),
    )
        .prop_map(|(b, s, a)| (b, s, unit(a)))
}

proptest! {
    #[test]
    fn intervention_algebra((hb, hs, a) in triple(8)) {
        let h = intervene(&hb, &hs, &a).unwrap();
        // The a-component comes from the source, the rest from the base.
        prop_assert!((dot(&h, &a) - dot(&hs, &a)).abs() < 1e-4);
        for i in 0..h.len() {
            let orth_h = h[i] - a[i] * dot(&h, &a);
            let orth_b = hb[i] - a[i] * dot(&hb, &a);
            prop_assert!((orth_h - orth_b).abs() < 1e-5 * (1.0 + orth_b.abs()) * 8.0);
        }
        let twice = intervene(&h, &hs, &a).unwrap();
        for (x, y) in twice.iter().zip(&h) {
            prop_assert!((x - y).abs() <= 4.0 * f32::EPSILON * (1.0 + y.abs()) * 8.0);
        }
        let neg: Vec<f32> = a.iter().map(|x| -x).collect();
        prop_assert_eq!(intervene(&hb, &hs, &neg).unwrap(), h);
        prop_assert_eq!(intervene(&hb, &hb, &a).unwrap(), hb);
    }
}
