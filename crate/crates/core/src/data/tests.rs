use std::fs;

use proptest::prelude::*;

use super::*;
use crate::par::Exec;
use crate::Error;

fn small_spec() -> SyntheticSpec {
    SyntheticSpec {
        image_size: 32,
        counts: SplitCounts {
            train: 6,
            val: 3,
            test: 3,
        },
        ..SyntheticSpec::default()
    }
}

fn read_all(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn default_spec_writes_every_file_and_both_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let files = generate_synthetic_dataset(&SyntheticSpec::default(), dir.path(), Exec::Parallel).unwrap();
    assert_eq!(files.len(), 300);
    let all = read_all(dir.path());
    assert_eq!(all.len(), 302);
    assert!(dir.path().join(LABELS_MANIFEST).is_file());
    assert!(dir.path().join(BOXES_MANIFEST).is_file());

    let ds = load_dataset(dir.path()).unwrap();
    for split in Split::ALL {
        let s = ds.split(split);
        let want = SyntheticSpec::default().counts.get(split);
        assert_eq!(s.len(), want);
        for k in 0..2 {
            assert_eq!(s.iter().filter(|x| x.label == k).count(), want / 2);
        }
    }
}

#[test]
fn generation_is_deterministic_and_independent_of_parallelism() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate_synthetic_dataset(&small_spec(), a.path(), Exec::Parallel).unwrap();
    generate_synthetic_dataset(&small_spec(), b.path(), Exec::Sequential).unwrap();
    assert_eq!(read_all(a.path()), read_all(b.path()));
}

#[test]
fn load_roundtrips_labels_and_boxes() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        classes: vec![
            LesionRecipe::new("normal", LesionKind::None),
            LesionRecipe::new("drusen", LesionKind::BrightBlob),
            LesionRecipe::new("fluid", LesionKind::DarkEllipse),
        ],
        ..small_spec()
    };
    generate_synthetic_dataset(&spec, dir.path(), Exec::Parallel).unwrap();
    let ds = load_dataset(dir.path()).unwrap();
    assert_eq!(ds.class_names, vec!["drusen", "fluid", "normal"]);
    let text = fs::read_to_string(dir.path().join(BOXES_MANIFEST)).unwrap();
    let records: Vec<BoxRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), ds.samples.len());
    for (rec, s) in records.iter().zip(&ds.samples) {
        assert_eq!(Path::new(&rec.path), s.path);
        assert_eq!(rec.label.clone().into_name(), ds.class_names[s.label]);
        assert_eq!(rec.boxes, s.boxes);
    }
    for (i, s) in ds.samples.iter().enumerate() {
        let seed = spec.seed ^ i as u64;
        let class = spec.classes.iter().position(|c| c.name == ds.class_names[s.label]).unwrap();
        let rendered = render_sample(&spec, class, seed).unwrap();
        assert_eq!(rendered.boxes, s.boxes);
        assert_eq!(rendered.boxes.is_empty(), spec.classes[class].kind == LesionKind::None);
        for (a, b) in rendered.image.pixels().iter().zip(s.image.pixels()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }
}

#[test]
fn lesion_pixels_lie_inside_their_boxes() {
    // Pixel-scan oracle: compare each stored image with its lesion-free
    // background and require every clearly changed pixel to be boxed.
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        classes: vec![
            LesionRecipe::new("drusen", LesionKind::BrightBlob),
            LesionRecipe::new("fluid", LesionKind::DarkEllipse),
        ],
        lesions_per_image: [1, 4],
        ..small_spec()
    };
    generate_synthetic_dataset(&spec, dir.path(), Exec::Parallel).unwrap();
    let ds = load_dataset(dir.path()).unwrap();
    let threshold = 3.0 * spec.noise_sigma;
    let mut changed = 0;
    for (i, s) in ds.samples.iter().enumerate() {
        let class = spec.classes.iter().position(|c| c.name == ds.class_names[s.label]).unwrap();
        let bg = render_sample(&spec, class, spec.seed ^ i as u64).unwrap().background;
        assert!(!s.boxes.is_empty() && s.boxes.len() <= 4);
        for y in 0..32 {
            for x in 0..32 {
                let quantized_bg = (bg.get(x, y) * 255.0).round() / 255.0;
                if (s.image.get(x, y) - quantized_bg).abs() > threshold {
                    changed += 1;
                    assert!(s.boxes.iter().any(|b| b.contains(x, y)), "{} pixel ({x},{y})", s.path.display());
                }
            }
        }
        for b in &s.boxes {
            assert!(b.fits(32, 32));
        }
    }
    assert!(changed > 0);
}

#[test]
fn invalid_specs_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    for bad in [
        SyntheticSpec {
            image_size: 30,
            ..small_spec()
        },
        SyntheticSpec {
            lesion_radius: [5.0, 2.0],
            ..small_spec()
        },
        SyntheticSpec {
            counts: SplitCounts {
                train: 0,
                val: 1,
                test: 1,
            },
            ..small_spec()
        },
    ] {
        let err = generate_synthetic_dataset(&bad, dir.path(), Exec::Sequential).unwrap_err();
        assert_eq!(err.exit_code(), 2, "{err}");
    }
}

#[test]
fn unwritable_output_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    let err = generate_synthetic_dataset(&small_spec(), &blocker, Exec::Sequential).unwrap_err();
    assert!(matches!(err, Error::Io { .. }), "{err}");
}

#[test]
fn manifest_errors_name_file_and_line() {
    let dir = tempfile::tempdir().unwrap();
    generate_synthetic_dataset(&small_spec(), dir.path(), Exec::Sequential).unwrap();
    let labels = dir.path().join(LABELS_MANIFEST);
    let mut text = fs::read_to_string(&labels).unwrap();
    text.push_str("{\"path\": \"train/x.png\", \n");
    fs::write(&labels, &text).unwrap();
    match load_dataset(dir.path()).unwrap_err() {
        Error::Data { path, line, .. } => {
            assert_eq!(path, labels);
            assert_eq!(line, Some(13));
        }
        other => panic!("unexpected {other}"),
    }

    let lines: Vec<&str> = text.lines().take(12).collect();
    let mut text = lines.join("\n");
    text.push_str("\n{\"path\": \"train/missing.png\", \"label\": \"normal\"}\n");
    fs::write(&labels, text).unwrap();
    let err = load_dataset(dir.path()).unwrap_err();
    assert!(err.to_string().contains("missing.png"), "{err}");
}

#[test]
fn box_outside_image_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    generate_synthetic_dataset(&small_spec(), dir.path(), Exec::Sequential).unwrap();
    let boxes = dir.path().join(BOXES_MANIFEST);
    let text = fs::read_to_string(&boxes).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let rec = BoxRecord {
        path: "train/0001.png".into(),
        label: LabelName::Name("drusen".into()),
        boxes: vec![geometry_box(20, 20, 40, 30)],
    };
    lines[1] = serde_json::to_string(&rec).unwrap();
    fs::write(&boxes, lines.join("\n")).unwrap();
    match load_dataset(dir.path()).unwrap_err() {
        Error::Data { line, .. } => assert_eq!(line, Some(2)),
        other => panic!("unexpected {other}"),
    }
}

fn geometry_box(a: usize, b: usize, c: usize, d: usize) -> BBox {
    BBox::new(a, b, c, d).unwrap()
}

#[test]
fn image_folders_are_ingested_and_odd_files_counted() {
    let dir = tempfile::tempdir().unwrap();
    let img = crate::raster::Image::filled(8, 8, 0.5);
    for (split, class, n) in [("train", "a", 2), ("train", "b", 1), ("test", "a", 1)] {
        let d = dir.path().join(split).join(class);
        fs::create_dir_all(&d).unwrap();
        for i in 0..n {
            crate::raster::save_gray8(&img, &d.join(format!("{i}.png"))).unwrap();
        }
        fs::write(d.join("notes.txt"), b"x").unwrap();
    }
    let ds = load_dataset(dir.path()).unwrap();
    assert_eq!(ds.samples.len(), 4);
    assert_eq!(ds.skipped, 3);
    assert_eq!(ds.class_names, vec!["a", "b"]);
    assert_eq!(ds.split(Split::Test).len(), 1);
    assert!(ds.samples.iter().all(|s| (s.image.get(0, 0) - 128.0 / 255.0).abs() < 1e-6));
    assert_eq!(ds.lesion_class(), None);
}

fn test_image(seed: u64) -> Image {
    render_sample(&small_spec(), 1, seed).unwrap().image
}

#[test]
fn augmentation_contracts() {
    let img = test_image(3);
    let cfg = AugmentConfig::default();
    assert_eq!(two_view_augment(&img, 9, &cfg), two_view_augment(&img, 9, &cfg));
    let id = two_view_augment(&img, 9, &AugmentConfig::identity());
    assert_eq!(id.view1, img);
    assert_eq!(id.view2, img);
    assert!(!id.flipped);
}

#[test]
fn views_stay_aligned() {
    // Without noise every view is an affine map of the same (possibly flipped)
    // image, so pixel order is identical: ranking the two views gives the same
    // ordering wherever neither view is clamped.
    let img = test_image(5);
    let cfg = AugmentConfig {
        noise_sigma: 0.0,
        ..AugmentConfig::default()
    };
    let mut saw_flip = [false; 2];
    for seed in 0..20 {
        let pair = two_view_augment(&img, seed, &cfg);
        saw_flip[usize::from(pair.flipped)] = true;
        let base = if pair.flipped { img.flip_horizontal() } else { img.clone() };
        let fit = |v: &Image| {
            let inner: Vec<(f32, f32)> = base
                .pixels()
                .iter()
                .zip(v.pixels())
                .filter(|(_, &o)| o > 0.0 && o < 1.0)
                .map(|(&a, &b)| (a, b))
                .collect();
            let (a0, b0) = inner[0];
            let (a1, b1) = *inner.iter().max_by(|x, y| (x.0 - a0).abs().total_cmp(&(y.0 - a0).abs())).unwrap();
            let c = (b1 - b0) / (a1 - a0);
            inner.iter().all(|&(a, b)| (b - (b0 + c * (a - a0))).abs() < 1e-4)
        };
        assert!(fit(&pair.view1) && fit(&pair.view2), "seed {seed}");
    }
    assert!(saw_flip[0] && saw_flip[1]);
}

#[test]
fn flip_remaps_boxes_onto_lesions() {
    let r = render_sample(&small_spec(), 1, 11).unwrap();
    let cfg = AugmentConfig {
        brightness: 0.0,
        contrast: [1.0, 1.0],
        noise_sigma: 0.0,
        flip: true,
    };
    let seed = (0..).find(|&s| two_view_augment(&r.image, s, &cfg).flipped).unwrap();
    let pair = two_view_augment(&r.image, seed, &cfg);
    let bg = r.background.flip_horizontal();
    for b in &r.boxes {
        let f = b.flip_horizontal(32);
        let inside: f32 = (f.y_min..f.y_max)
            .flat_map(|y| (f.x_min..f.x_max).map(move |x| (x, y)))
            .map(|(x, y)| (pair.view1.get(x, y) - bg.get(x, y)).abs())
            .sum();
        assert!(inside > 0.0);
    }
}

proptest! {
    #[test]
    fn augmented_pixels_stay_in_unit_range(seed in 0u64..1000, brightness in 0.0f32..0.5) {
        let cfg = AugmentConfig { brightness, ..AugmentConfig::default() };
        let pair = two_view_augment(&test_image(seed % 7), seed, &cfg);
        for v in pair.view1.pixels().iter().chain(pair.view2.pixels()) {
            prop_assert!((0.0..=1.0).contains(v));
        }
    }
}
