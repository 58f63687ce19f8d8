use std::collections::HashMap;

use brushnet_core::data::{load_samples, materialize, synth_dataset, write_dataset, DataKind, RecordSide};
use brushnet_core::masking::{MAX_MASK_FRACTION, MIN_MASK_FRACTION};
use brushnet_core::scene::{parse_caption, PaletteColor, SceneSampler, ShapeKind};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn thousand_scenes_balance_shapes_and_colours() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut sampler = SceneSampler::default();
    let mut shapes: HashMap<ShapeKind, usize> = HashMap::new();
    let mut colours: HashMap<PaletteColor, usize> = HashMap::new();
    let mut objects = 0;
    for _ in 0..1000 {
        for o in sampler.sample(&mut rng).objects {
            *shapes.entry(o.shape).or_default() += 1;
            *colours.entry(o.color).or_default() += 1;
            objects += 1;
        }
    }
    for s in ShapeKind::ALL {
        let share = shapes[&s] as f64 / objects as f64;
        assert!((share - 1.0 / 3.0).abs() <= 0.05, "{s:?} share {share}");
    }
    for c in PaletteColor::ALL {
        let share = colours.get(&c).copied().unwrap_or(0) as f64 / objects as f64;
        assert!(share > 0.0, "{c:?} never drawn");
    }
}

#[test]
fn written_dataset_loads_back_identically() {
    let records = synth_dataset(6, 3, DataKind::Seg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_dataset(&records, dir.path()).unwrap();
    let loaded = load_samples(&manifest).unwrap();
    let fresh = materialize(&records).unwrap();
    assert_eq!(loaded.len(), fresh.len());
    for (a, b) in loaded.iter().zip(&fresh) {
        assert_eq!(a.record, b.record);
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.image.to_png_bytes().unwrap(), b.image.to_png_bytes().unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn seg_pairs_are_complementary_and_filtered(seed in any::<u64>()) {
        let samples = materialize(&synth_dataset(4, seed, DataKind::Seg).unwrap()).unwrap();
        for pair in samples.chunks(2) {
            let (inside, outside) = (&pair[0], &pair[1]);
            prop_assert_eq!(inside.record.meta.side, RecordSide::Inside);
            prop_assert_eq!(outside.record.meta.side, RecordSide::Outside);
            prop_assert_eq!(&inside.mask.complement(), &outside.mask);
            for s in pair {
                let c = s.mask.coverage();
                prop_assert!((MIN_MASK_FRACTION..=MAX_MASK_FRACTION).contains(&c));
                prop_assert!(parse_caption(&s.record.caption).is_ok());
                prop_assert_eq!(&s.record.regenerate_mask().unwrap(), &s.mask);
            }
        }
    }

    #[test]
    fn brush_records_regenerate(seed in any::<u64>()) {
        for s in materialize(&synth_dataset(3, seed, DataKind::Brush).unwrap()).unwrap() {
            prop_assert_eq!(s.record.meta.side, RecordSide::Brush);
            prop_assert_eq!(&s.record.regenerate_mask().unwrap(), &s.mask);
        }
    }
}
