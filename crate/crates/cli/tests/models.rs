//! The checked-in model files must equal what the catalog generates.
//! Regenerate them with `MBMAPQ_WRITE_MODELS=1 cargo test -p mbmapq-cli --test models`.

use std::path::PathBuf;

use mbmapq::catalog::shipped;
use mbmapq::modelfile::ModelFile;

fn models_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../models")
}

#[test]
fn shipped_models_match_the_catalog() {
    let dir = models_dir();
    let write = std::env::var_os("MBMAPQ_WRITE_MODELS").is_some();
    for (name, model) in shipped() {
        let path = dir.join(&name);
        let text = model.to_toml();
        if write {
            std::fs::write(&path, &text).unwrap();
        }
        let on_disk = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(on_disk, text, "{name} differs from the catalog");
        assert_eq!(ModelFile::parse(&on_disk, &name).unwrap(), model);
    }
}
