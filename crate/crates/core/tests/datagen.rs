use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use mtrnet::datagen::{generate_sample, load_corpus, read_manifest, sample_rng, RenderSpec, Split, MANIFEST_FILE};

mod common;

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect()
}

#[test]
fn same_seed_gives_identical_samples() {
    let spec = RenderSpec {
        seed: 1234,
        rotation: (-15.0, 15.0),
        ..RenderSpec::default()
    };
    let a = generate_sample(&spec, &mut sample_rng(1234, 0), "x").unwrap();
    let b = generate_sample(&spec, &mut sample_rng(1234, 0), "x").unwrap();
    assert_eq!(a, b);
    assert_eq!(a.text_image.as_raw(), b.text_image.as_raw());
}

#[test]
fn single_sample_corpus_has_three_files_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    common::write_corpus(&common::small_spec(1), 1, dir.path());
    let files = tree(dir.path());
    assert_eq!(files.len(), 4);
    assert!(files.contains_key(MANIFEST_FILE));
    assert_eq!(read_manifest(dir.path()).unwrap().ids.len(), 1);
}

#[test]
fn regenerating_a_corpus_is_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    common::write_corpus(&common::small_spec(5), 10, a.path());
    common::write_corpus(&common::small_spec(5), 10, b.path());
    assert_eq!(tree(a.path()), tree(b.path()));
    let c = tempfile::tempdir().unwrap();
    common::write_corpus(&common::small_spec(6), 10, c.path());
    assert_ne!(tree(a.path()), tree(c.path()));
}

#[test]
fn corpus_loads_back_as_generated() {
    let dir = tempfile::tempdir().unwrap();
    let spec = common::small_spec(8);
    common::write_corpus(&spec, 6, dir.path());
    let loaded = load_corpus(dir.path(), Split::All).unwrap();
    let direct = common::samples(&spec, 6);
    assert_eq!(loaded.len(), 6);
    for (l, d) in loaded.iter().zip(&direct) {
        assert_eq!(l.text_image, d.text_image);
        assert_eq!(l.background_image, d.background_image);
        assert_eq!(l.regions, d.regions);
    }
    let train = load_corpus(dir.path(), Split::Train).unwrap().len();
    let val = load_corpus(dir.path(), Split::Val).unwrap().len();
    assert_eq!(train + val, 6);
}
