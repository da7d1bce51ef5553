//! Regenerates the model files under `testdata/models`.

use std::path::Path;

use sol_mini::model_ir::{save_model, save_weights};
use sol_mini::zoo;

fn main() -> sol_mini::Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("testdata/models");
    std::fs::create_dir_all(&dir).expect("create testdata/models");
    for (name, g) in zoo::bundled_models() {
        save_model(&g, &dir.join(format!("{name}.json")))?;
        save_weights(&g.params, &dir.join(format!("{name}.solw")))?;
        println!("{name}: {} parameters", g.param_count());
    }
    Ok(())
}
