use cellnn::density::{contour_levels, kde_fit, mass_above, BandwidthRule, ContourSpec, GridSpec, WeightedPoint};
use cellnn::embed::{tsne_embed, Embedding2D, TsneParams};
use cellnn::ingest::validate;
use cellnn::quantify::{cells_in_bbox, odds_ratio, roi_composition, BBox, RatioFlag};
use cellnn::signature::{build_atlas, compute_signatures, AtlasEntry, SignatureOutcome, SignatureParams};
use cellnn::synth::{generate_tissue, TissueSpec};
use cellnn::{Anchor, CellType, NeighborhoodSignature, SignatureAtlas};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_embedding(seed: u64, n: usize) -> Embedding2D {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = std::collections::BTreeSet::new();
    let mut entries = Vec::new();
    while entries.len() < n {
        let mut counts = [0u32; 6];
        for _ in 0..10 {
            counts[rng.random_range(0..6)] += 1;
        }
        if seen.insert(counts) {
            entries.push(AtlasEntry {
                signature: NeighborhoodSignature::new(counts),
                weights: vec![rng.random_range(0..20), rng.random_range(0..20), rng.random_range(1..5)],
            });
        }
    }
    let atlas = SignatureAtlas::from_entries(10, Anchor::All, vec!["A".into(), "B".into(), "C".into()], entries).unwrap();
    let coords = (0..n).map(|_| [rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)]).collect();
    Embedding2D::new(atlas, coords).unwrap()
}

fn scan(emb: &Embedding2D, b: &BBox, g: usize) -> u64 {
    emb.atlas
        .entries()
        .iter()
        .zip(&emb.coords)
        .filter(|(_, p)| p[0] >= b.xmin && p[0] <= b.xmax && p[1] >= b.ymin && p[1] <= b.ymax)
        .map(|(e, _)| e.weights[g])
        .sum()
}

fn bbox_strategy() -> impl Strategy<Value = BBox> {
    (-12.0..12.0f64, -12.0..12.0f64, 0.01..15.0f64, 0.01..15.0f64)
        .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn bbox_counts_match_scan(seed in 0u64..1000, b in bbox_strategy()) {
        let emb = random_embedding(seed, 120);
        for (g, label) in ["A", "B", "C"].iter().enumerate() {
            prop_assert_eq!(cells_in_bbox(&emb, &b, label).unwrap(), scan(&emb, &b, g));
        }
        let r = odds_ratio(&emb, &b, "A", "B").unwrap();
        let back = odds_ratio(&emb, &b, "B", "A").unwrap();
        if let (Some(x), Some(y)) = (r.ratio, back.ratio) {
            if x > 0.0 {
                prop_assert!((x * y - 1.0).abs() < 1e-12);
            }
        }
        let grown = BBox::new(b.xmin - 1.0, b.ymin - 0.5, b.xmax + 0.25, b.ymax + 2.0).unwrap();
        let r2 = odds_ratio(&emb, &grown, "A", "B").unwrap();
        prop_assert!(r2.n1 >= r.n1 && r2.n2 >= r.n2);
        prop_assert!(r.n1 <= r.N1 && r.n2 <= r.N2);
    }

    #[test]
    fn composition_matches_scan(seed in 0u64..1000, b in bbox_strategy()) {
        let emb = random_embedding(seed, 80);
        let rows: Vec<usize> = (0..emb.len()).filter(|&i| b.contains(emb.coords[i])).collect();
        let total: u64 = rows.iter().map(|&i| emb.atlas.entries()[i].total_weight()).sum();
        match roi_composition(&emb, &b) {
            Err(_) => prop_assert_eq!(total, 0),
            Ok(c) => {
                let mean = c.pooled.mean.unwrap();
                for t in 0..6 {
                    let want = rows.iter()
                        .map(|&i| emb.atlas.entries()[i].total_weight() as f64 * emb.atlas.entries()[i].signature.counts()[t] as f64)
                        .sum::<f64>() / total as f64;
                    prop_assert!((mean[t] - want).abs() < 1e-12);
                    prop_assert!((0.0..=10.0).contains(&mean[t]));
                }
                prop_assert!((mean.iter().sum::<f64>() - 10.0).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn whole_box_ratio_is_one() {
    let emb = random_embedding(3, 60);
    let b = emb.bounds().unwrap();
    let whole = BBox::new(b[0], b[1], b[2], b[3]).unwrap();
    let r = odds_ratio(&emb, &whole, "A", "C").unwrap();
    assert_eq!(r.ratio, Some(1.0));
    assert_eq!(r.flag, RatioFlag::Finite);
}

#[test]
fn planted_anchors_see_their_ring() {
    let spec = TissueSpec::planted_pair(4, 2000, 25, 42);
    assert!(spec.motif_isolation_ok());
    let cohort = generate_tissue(&spec).unwrap();
    assert!(validate(&cohort).is_empty());
    let assignment = compute_signatures(&cohort, &SignatureParams::default()).unwrap();
    let per_slide = spec.cells_per_slide(&spec.groups[0]);
    let mut hits = 0;
    let mut anchors = 0;
    for (pos, cell) in cohort.cells().iter().enumerate() {
        let local = pos % per_slide;
        if local < 2000 || (local - 2000) % 11 != 0 {
            continue;
        }
        anchors += 1;
        let ring = if cell.group == "A" { CellType::Lymphocyte } else { CellType::Epithelial };
        let mut want = [0u32; 6];
        want[ring.ordinal()] = 10;
        if let SignatureOutcome::Retained(s) = assignment.entries()[pos].1 {
            hits += (s.counts() == want) as usize;
        }
    }
    assert_eq!(anchors, 8 * 25);
    assert!(hits as f64 >= 0.95 * anchors as f64, "{hits}/{anchors}");
}

#[test]
fn staged_pipeline_on_planted_cohort() {
    let spec = TissueSpec::planted_pair(2, 1500, 30, 7);
    let cohort = generate_tissue(&spec).unwrap();
    let assignment = compute_signatures(&cohort, &SignatureParams::default()).unwrap();
    let atlas = build_atlas(&assignment, &cohort, Anchor::Type(CellType::Neutrophil)).unwrap();
    let retained_neu = cohort
        .cells()
        .iter()
        .zip(assignment.entries())
        .filter(|(c, (_, o))| c.cell_type == CellType::Neutrophil && o.signature().is_some())
        .count() as u64;
    assert_eq!(atlas.total_weight(), retained_neu);
    let params = TsneParams {
        perplexity: 10.0,
        iterations: 400,
        ..TsneParams::default()
    };
    let emb = tsne_embed(&atlas, &params).unwrap();
    let history = &emb.diagnostics.as_ref().unwrap().kl_history;
    assert!(history.last().unwrap().kl <= history[0].kl);

    for (g, label) in atlas.groups().iter().enumerate() {
        let points: Vec<WeightedPoint> = atlas
            .entries()
            .iter()
            .zip(&emb.coords)
            .map(|(e, p)| WeightedPoint { x: p[0], y: p[1], w: e.weights[g] as f64 })
            .collect();
        let grid = kde_fit(label.clone(), &points, BandwidthRule::Scott, &GridSpec::default()).unwrap();
        assert!((grid.mass() - 1.0).abs() < 0.01, "{label}: {}", grid.mass());
        let spec = ContourSpec::default();
        let levels = contour_levels(&grid, &spec);
        for (q, t) in spec.quantiles.iter().zip(&levels) {
            assert!(mass_above(&grid, *t) / grid.mass() + 1e-9 >= 1.0 - q);
        }
    }

    let lym = NeighborhoodSignature::new([0, 0, 10, 0, 0, 0]);
    let i = atlas.entries().iter().position(|e| e.signature == lym).unwrap();
    let p = emb.coords[i];
    let b = BBox::new(p[0] - 0.5, p[1] - 0.5, p[0] + 0.5, p[1] + 0.5).unwrap();
    let r = odds_ratio(&emb, &b, "A", "B").unwrap();
    assert!(r.flag == RatioFlag::Infinite || r.ratio.unwrap() >= 5.0, "{r:?}");
}
