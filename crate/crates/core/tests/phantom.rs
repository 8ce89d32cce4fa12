use mvpnet::dataset::{load_directory, LabelledVolume};
use mvpnet::phantom::{contrast_reports, generate, write_dataset, PhantomSpec};

fn small_spec() -> PhantomSpec {
    PhantomSpec { n_volumes: 6, ..PhantomSpec::default() }
}

#[test]
fn same_seed_gives_byte_identical_dataset() {
    let spec = small_spec();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_dataset(&generate(&spec, 7).unwrap(), a.path()).unwrap();
    write_dataset(&generate(&spec, 7).unwrap(), b.path()).unwrap();
    let mut names: Vec<_> = std::fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), spec.n_volumes + 4);
    for n in names {
        assert_eq!(std::fs::read(a.path().join(&n)).unwrap(), std::fs::read(b.path().join(&n)).unwrap(), "{n:?}");
    }
    let other = generate(&spec, 8).unwrap();
    assert_ne!(other.volumes[0].volume, generate(&spec, 7).unwrap().volumes[0].volume);
}

#[test]
fn no_lesions_means_empty_ground_truth() {
    let spec = PhantomSpec { lesions_min: 0, lesions_max: 0, ..small_spec() };
    let ds = generate(&spec, 1).unwrap();
    for v in &ds.volumes {
        assert!(v.lesions.is_empty());
        assert!(v.boxes.iter().all(Vec::is_empty));
        assert!(v.key_slices().is_empty());
    }
}

#[test]
fn lesions_meet_contrast_targets() {
    let spec = small_spec();
    let ds = generate(&spec, 7).unwrap();
    let mut n = 0;
    for v in &ds.volumes {
        for r in contrast_reports(&spec, v) {
            assert!(r.passes(&spec), "{} {:?}", v.id, r);
            n += 1;
        }
    }
    assert!(n >= spec.n_volumes * spec.lesions_min);
}

#[test]
fn boxes_cover_lesion_pixels() {
    let spec = small_spec();
    for v in &generate(&spec, 3).unwrap().volumes {
        for l in &v.lesions {
            for z in 0..spec.slices {
                let px = l.pixels(z, spec.size);
                if px.is_empty() {
                    continue;
                }
                let b = l.bbox(z, spec.size).unwrap();
                assert!(v.boxes[z].contains(&b));
                let inside = px.iter().filter(|&&(y, x)| b.contains_point(x as f64 + 0.5, y as f64 + 0.5)).count();
                assert!(inside as f64 >= 0.9 * px.len() as f64);
            }
        }
    }
}

#[test]
fn positions_increase_with_slice_index() {
    let spec = small_spec();
    for v in &generate(&spec, 2).unwrap().volumes {
        assert!(v.positions.windows(2).all(|w| w[0].p < w[1].p));
        assert_eq!(v.positions[0].p, 0.0);
        assert_eq!(v.positions.last().unwrap().p, 1.0);
        for (z, p) in v.positions.iter().enumerate() {
            assert_eq!(p.zone, spec.zone_of_slice(z));
        }
    }
}

#[test]
fn written_dataset_loads_back() {
    let spec = small_spec();
    let ds = generate(&spec, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&ds, dir.path()).unwrap();
    let loaded = load_directory(dir.path()).unwrap();
    assert_eq!(loaded.len(), ds.volumes.len());
    for (l, v) in loaded.iter().zip(&ds.volumes) {
        let direct = LabelledVolume::from(v);
        assert_eq!(l.id, direct.id);
        assert_eq!(l.volume, direct.volume);
        assert_eq!(l.boxes, direct.boxes);
        assert_eq!(l.positions, direct.positions);
        assert_eq!(l.keys, direct.keys);
    }
    assert_eq!(PhantomSpec::load(&dir.path().join("phantom.cfg")).unwrap(), spec);
}

#[test]
fn overcrowded_spec_fails_cleanly() {
    let spec = PhantomSpec { lesions_min: 60, lesions_max: 60, ..small_spec() };
    assert!(generate(&spec, 0).is_err());
}
