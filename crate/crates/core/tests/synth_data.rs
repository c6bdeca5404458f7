use masktx::config::SceneConfig;
use masktx::dataset::{read_manifest, read_panoptic, read_scene, synthesize, write_scene, Dataset};
use masktx::error::Error;
use masktx::panoptic::{Panoptic, Segment, VOID};
use masktx::pnm::{decode_pgm, decode_ppm, encode_pgm, encode_ppm, GrayImage, RgbImage};
use masktx::synth::generate_scene;
use proptest::prelude::*;
use std::collections::BTreeSet;
use std::path::Path;

#[test]
fn same_seed_and_index_give_identical_scenes() {
    let cfg = SceneConfig::default();
    for index in [0, 1, 77, 12345] {
        let (a, b) = (generate_scene(&cfg, index), generate_scene(&cfg, index));
        assert_eq!(a.image, b.image);
        assert_eq!(a.gt, b.gt);
    }
    assert_ne!(generate_scene(&cfg, 0).image, generate_scene(&cfg, 1).image);
    let other = SceneConfig { seed: 1, ..cfg.clone() };
    assert_ne!(generate_scene(&other, 0).image, generate_scene(&cfg, 0).image);
}

#[test]
fn no_things_gives_stuff_tiling_the_image() {
    let cfg = SceneConfig { things: vec![], min_things: 0, max_things: 0, ..SceneConfig::default() };
    let vocab = cfg.vocabulary();
    for index in 0..50 {
        let s = generate_scene(&cfg, index);
        assert!(s.gt.ids.iter().all(|&id| id != VOID));
        assert!(s.gt.segments.iter().all(|seg| !vocab.is_thing(seg.class)));
        assert_eq!(s.gt.segments.len(), 2);
    }
}

#[test]
fn thousand_scenes_satisfy_ground_truth_invariants() {
    let cfg = SceneConfig::default();
    let vocab = cfg.vocabulary();
    let slots = 16;
    for index in 0..1000 {
        let gt = generate_scene(&cfg, index).gt;
        gt.validate(vocab.len()).unwrap();
        assert_eq!(gt.ids.len(), cfg.height * cfg.width);
        assert!(gt.segments.len() <= slots);
        assert!(gt.segments.len() <= cfg.max_things + cfg.stuff.len());
        let ids: BTreeSet<u32> = gt.segments.iter().map(|s| s.id).collect();
        assert_eq!(ids.len(), gt.segments.len());
        let areas = gt.areas();
        assert!(gt.segments.iter().all(|s| areas.get(&s.id).copied().unwrap_or(0) >= 1));
        // Without occlusion every pixel belongs to some stuff band or thing.
        assert!(gt.ids.iter().all(|&id| id != VOID));
    }
}

#[test]
fn occluded_scenes_keep_only_visible_pixels() {
    let cfg = SceneConfig { occlusion: true, max_things: 8, ..SceneConfig::default() };
    for index in 0..300 {
        let gt = generate_scene(&cfg, index).gt;
        gt.validate(cfg.vocabulary().len()).unwrap();
    }
}

#[test]
fn every_class_appears_within_500_scenes() {
    let cfg = SceneConfig::default();
    let n = cfg.vocabulary().len();
    for window in [0u64, 500, 7000] {
        let mut seen = BTreeSet::new();
        for index in window..window + 500 {
            seen.extend(generate_scene(&cfg, index).gt.segments.iter().map(|s| s.class));
        }
        assert_eq!(seen.len(), n, "window starting at {window}");
    }
}

#[test]
fn directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SceneConfig::default();
    let stems = synthesize(&cfg, dir.path(), 10, 25).unwrap();
    assert_eq!(read_manifest(dir.path()).unwrap(), stems);
    let loaded = Dataset::load(dir.path()).unwrap();
    let generated = Dataset::generate(&cfg, 10, 25);
    assert_eq!(loaded.vocab, generated.vocab);
    for (a, b) in loaded.examples.iter().zip(&generated.examples) {
        assert_eq!(a.stem, b.stem);
        assert_eq!(a.gt, b.gt);
        assert_eq!(a.image, b.image);
    }
    for (i, stem) in stems.iter().enumerate() {
        let (img, gt) = read_scene(dir.path(), stem, &cfg.vocabulary()).unwrap();
        let s = generate_scene(&cfg, 10 + i as u64);
        assert_eq!((img, gt), (s.image, s.gt));
    }
}

fn expect_parse_error<T: std::fmt::Debug>(r: masktx::Result<T>) -> usize {
    match r {
        Err(Error::Parse { offset, .. }) => offset,
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn truncated_pgm_is_a_parse_error() {
    let img = GrayImage { width: 3, height: 2, maxval: 65535, data: vec![1, 2, 3, 4, 5, 6] };
    let bytes = encode_pgm(&img);
    assert_eq!(decode_pgm(&bytes, Path::new("x.pgm")).unwrap(), img);
    for cut in [0, 1, 4, bytes.len() - 1] {
        expect_parse_error(decode_pgm(&bytes[..cut], Path::new("x.pgm")));
    }
    let offset = expect_parse_error(decode_pgm(b"P5 3 x 65535\n", Path::new("x.pgm")));
    assert_eq!(offset, 5);
    expect_parse_error(decode_ppm(b"P5 1 1 255\n\0", Path::new("x.ppm")));
}

#[test]
fn hand_written_fixture_files() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = SceneConfig::default().vocabulary();
    // 2x2 map: [1, 1; 2, 0], 16-bit big endian.
    let mut pgm = b"P5\n2 2\n65535\n".to_vec();
    pgm.extend_from_slice(&[0, 1, 0, 1, 0, 2, 0, 0]);
    std::fs::write(dir.path().join("a.pgm"), &pgm).unwrap();
    std::fs::write(dir.path().join("a.labels.txt"), "1\tsky\n2\tsquare\n").unwrap();
    let mut ppm = b"P6\n# comment\n2 2\n255\n".to_vec();
    ppm.extend_from_slice(&[255, 0, 0, 0, 255, 0, 0, 0, 255, 9, 8, 7]);
    std::fs::write(dir.path().join("a.ppm"), &ppm).unwrap();

    let (img, gt) = read_scene(dir.path(), "a", &vocab).unwrap();
    assert_eq!(img.pixel(1, 1), [9, 8, 7]);
    assert_eq!(img.pixel(1, 0), [0, 255, 0]);
    let expected = Panoptic {
        height: 2,
        width: 2,
        ids: vec![1, 1, 2, 0],
        segments: vec![Segment { id: 1, class: 3 }, Segment { id: 2, class: 1 }],
    };
    assert_eq!(gt, expected);

    std::fs::write(dir.path().join("a.labels.txt"), "1\tsky\n2\thexagon\n").unwrap();
    let offset = expect_parse_error(read_panoptic(dir.path(), "a", &vocab));
    assert_eq!(offset, 6 + 2);
    std::fs::write(dir.path().join("a.labels.txt"), "1\tsky\n").unwrap();
    expect_parse_error(read_panoptic(dir.path(), "a", &vocab));
}

proptest! {
    #[test]
    fn pnm_round_trip(w in 1usize..9, h in 1usize..9, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let rgb = RgbImage { width: w, height: h, data: (0..w * h * 3).map(|_| rng.random()).collect() };
        prop_assert_eq!(decode_ppm(&encode_ppm(&rgb), Path::new("p")).unwrap(), rgb);
        for maxval in [255u16, 65535] {
            let gray = GrayImage { width: w, height: h, maxval, data: (0..w * h).map(|_| rng.random_range(0..=maxval)).collect() };
            prop_assert_eq!(decode_pgm(&encode_pgm(&gray), Path::new("p")).unwrap(), gray);
        }
    }

    #[test]
    fn scene_files_round_trip(index in 0u64..100_000) {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SceneConfig::default();
        let s = generate_scene(&cfg, index);
        write_scene(dir.path(), "s", &s.image, &s.gt, &cfg.vocabulary()).unwrap();
        let (img, gt) = read_scene(dir.path(), "s", &cfg.vocabulary()).unwrap();
        prop_assert_eq!(img, s.image);
        prop_assert_eq!(gt, s.gt);
    }
}
