use drscreen_core::landmarks::DiscLandmark;
use drscreen_core::lesions::{analysis_mask, classify_dark_lesions, grade, LesionConfig, LesionSet};
use drscreen_core::morphology::{dilate, Mask, Region, StructuringElement};
use drscreen_core::phantom::{generate, ExudateLayout, LesionKind, PhantomSpec};
use drscreen_core::pipeline::{analyze, CaseOutcome, PipelineConfig};
use drscreen_core::preprocess::FieldGeometry;
use proptest::prelude::*;

const W: usize = 400;
const FIELD: FieldGeometry = FieldGeometry { cx: 200.0, cy: 200.0, radius: 180.0 };

fn disc() -> DiscLandmark {
    DiscLandmark { center: (80.0, 200.0), radius: 25.0, score: 1.0, prominence: 1.0, confidence: 1.0, stable: true }
}

fn blob(cx: u32, cy: u32, r: f64) -> Region {
    let ri = r.ceil() as i64;
    let pixels = (-ri..=ri)
        .flat_map(|dy| (-ri..=ri).map(move |dx| (dx, dy)))
        .filter(|&(dx, dy)| ((dx * dx + dy * dy) as f64) <= r * r)
        .map(|(dx, dy)| ((cx as i64 + dx) as u32, (cy as i64 + dy) as u32))
        .collect();
    Region::from_pixels(pixels).unwrap()
}

fn blobs() -> impl Strategy<Value = Vec<Region>> {
    prop::collection::vec((40u32..360, 40u32..360, 0.6..14.0f64), 0..12)
        .prop_map(|v| v.into_iter().map(|(x, y, r)| blob(x, y, r)).collect())
}

fn at() -> chrono::DateTime<chrono::Utc> {
    chrono::DateTime::from_timestamp(1_700_000_000, 0).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn classification_ignores_input_order(
        (regions, shuffled) in blobs().prop_flat_map(|v| (Just(v.clone()), Just(v).prop_shuffle())),
        lines in prop::collection::vec((40usize..360, 40usize..360), 0..4),
    ) {
        let mut vessels = Mask::new(W, W);
        for (x, y) in lines {
            for dx in 0..60usize.min(W - x) {
                vessels.set(x + dx, y, true);
            }
        }
        let cfg = LesionConfig::default();
        let a = classify_dark_lesions(&regions, &vessels, 2.0, &disc(), &cfg);
        let b = classify_dark_lesions(&shuffled, &vessels, 2.0, &disc(), &cfg);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn adding_a_lesion_never_lowers_the_grade(
        hm in blobs(), ma in blobs(), ex in blobs(),
        extra in (40u32..360, 40u32..360, 0.6..14.0f64),
        kind in 0usize..3,
    ) {
        let cfg = LesionConfig::default();
        let macula = (205.0, 200.0);
        let mut set = LesionSet::empty(W, W);
        set.hemorrhages = hm;
        set.microaneurysms = ma;
        set.hard_exudates = ex;
        let before = grade(&set, &FIELD, macula, 25.0, &cfg);
        let r = blob(extra.0, extra.1, extra.2);
        match kind {
            0 => set.hemorrhages.push(r),
            1 => set.microaneurysms.push(r),
            _ => set.hard_exudates.push(r),
        }
        let after = grade(&set, &FIELD, macula, 25.0, &cfg);
        prop_assert!(after.level >= before.level);
        prop_assert!(after.referral || !before.referral);
        prop_assert!(after.level < 4);
    }
}

fn outcome(spec: &PhantomSpec) -> (CaseOutcome, drscreen_core::phantom::GroundTruth) {
    let ph = generate(spec).unwrap();
    let out = analyze(&ph.image, &PipelineConfig::default(), "t", at()).unwrap();
    assert!(out.report.accepted, "{}", out.report.reason);
    (out, ph.truth)
}

fn all_regions(set: &LesionSet) -> Vec<&Region> {
    set.hemorrhages.iter().chain(&set.microaneurysms).chain(&set.hard_exudates).chain(&set.bright_unclassified).collect()
}

#[test]
fn lesions_avoid_exclusions_and_the_edge_band() {
    let cfg = PipelineConfig::default();
    for (seed, g) in [(21u64, 1u8), (22, 2), (23, 2), (24, 3)] {
        let (out, _) = outcome(&PhantomSpec::for_grade(seed, g).unwrap());
        let set = out.lesions.as_ref().unwrap();
        let r = &out.report;
        let field = r.quality.field.unwrap();
        let disc = &r.landmarks.as_ref().unwrap().disc;
        let (w, h) = (set.vessel_mask.width(), set.vessel_mask.height());
        let band = analysis_mask(&field, w, h, cfg.lesions.edge_band).complement();
        let disc_zone = Mask::disc(w, h, disc.center.0, disc.center.1, cfg.lesions.disc_exclusion * disc.radius);
        let vessels = dilate(&set.vessel_mask, &StructuringElement::disc(cfg.lesions.vessel_proximity));

        assert!(!set.vessel_mask.intersects(&band), "seed {seed}: vessels in edge band");
        let regions = all_regions(set);
        for (i, a) in regions.iter().enumerate() {
            assert!(!a.touches(&band), "seed {seed}: lesion in edge band");
            assert!(!a.touches(&vessels), "seed {seed}: lesion on vessels");
            assert!(!a.touches(&disc_zone), "seed {seed}: lesion in disc zone");
            for b in &regions[i + 1..] {
                assert_eq!(a.overlap(b), 0, "seed {seed}: overlapping lesions");
            }
        }
        let dark = Mask::from_regions(w, h, set.hemorrhages.iter().chain(&set.microaneurysms));
        let dark = dilate(&dark, &StructuringElement::disc(cfg.lesions.vessel_proximity));
        for b in set.hard_exudates.iter().chain(&set.bright_unclassified) {
            assert!(!b.touches(&dark), "seed {seed}: bright lesion beside a dark one");
        }
    }
}

#[test]
fn plain_fundus_has_a_near_empty_vessel_mask_and_no_lesions() {
    let spec = PhantomSpec { seed: 3, vessel_depth: 0, ..PhantomSpec::default() };
    let (out, truth) = outcome(&spec);
    let set = out.lesions.unwrap();
    let field = truth.analysis_field.mask(spec.width, spec.height).count();
    assert!((set.vessel_mask.count() as f64) < 0.005 * field as f64);
    assert!(all_regions(&set).is_empty());
    let g = out.report.grade.unwrap();
    assert_eq!((g.level, g.referral), (0, false));
}

#[test]
fn round_blot_is_a_hemorrhage_and_small_dot_a_microaneurysm() {
    let mut spec = PhantomSpec { seed: 17, ..PhantomSpec::default() };
    spec.lesions.hemorrhages = 1;
    spec.lesions.hemorrhage_diameter = (0.5, 0.5);
    spec.lesions.microaneurysms = 1;
    spec.lesions.ma_diameter = (0.06, 0.06);
    let (out, truth) = outcome(&spec);
    let set = out.lesions.unwrap();
    let hm = truth.regions(LesionKind::Hemorrhage);
    let ma = truth.regions(LesionKind::Microaneurysm);
    assert_eq!(set.hemorrhages.len(), 1);
    assert!(set.hemorrhages[0].overlap(&hm[0]) > 0);
    assert!(set.microaneurysms.iter().any(|m| m.overlap(&ma[0]) > 0));
    assert!(set.microaneurysms.iter().all(|m| m.overlap(&hm[0]) == 0));
    assert!(set.microaneurysms.len() <= 3, "{} dots", set.microaneurysms.len());
}

#[test]
fn clustered_exudates_are_recovered_and_scattered_ones_are_not() {
    let mut spec = PhantomSpec { seed: 40, ..PhantomSpec::default() };
    spec.lesions.exudates = 12;
    let (out, truth) = outcome(&spec);
    let set = out.lesions.unwrap();
    let found = truth.regions(LesionKind::HardExudate).iter().filter(|t| set.hard_exudates.iter().any(|p| p.overlap(t) > 0)).count();
    assert!(found >= 10, "recovered {found} of 12");
    let g = out.report.grade.unwrap();
    assert_eq!((g.level, g.referral), (2, true));

    spec.lesions.exudate_layout = ExudateLayout::Scattered;
    let (out, _) = outcome(&spec);
    let set = out.lesions.unwrap();
    assert!(set.hard_exudates.is_empty());
    assert!(set.bright_unclassified.len() >= 10, "{} unclassified", set.bright_unclassified.len());
}

#[test]
fn grade_examples() {
    let cfg = LesionConfig::default();
    let macula = (205.0, 200.0);
    let empty = LesionSet::empty(W, W);
    let g = grade(&empty, &FIELD, macula, 25.0, &cfg);
    assert_eq!((g.level, g.referral), (0, false));

    let mut mild = LesionSet::empty(W, W);
    mild.microaneurysms = vec![blob(100, 100, 1.5), blob(300, 120, 1.5), blob(150, 300, 1.5)];
    assert_eq!(grade(&mild, &FIELD, macula, 25.0, &cfg).level, 1);

    let mut moderate = LesionSet::empty(W, W);
    moderate.hemorrhages = vec![blob(120, 280, 8.0)];
    moderate.hard_exudates = (0..6).map(|i| blob(190 + 6 * i, 215, 2.0)).collect();
    let g = grade(&moderate, &FIELD, macula, 25.0, &cfg);
    assert_eq!((g.level, g.referral), (2, true));
}
