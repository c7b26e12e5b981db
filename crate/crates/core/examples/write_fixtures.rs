//! Regenerates the bundled fixture checkpoints under `fixtures/`.

use std::path::Path;

use taskfuse::fixtures;
use taskfuse::write_checkpoint;

fn main() -> taskfuse::Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    write_checkpoint(dir.join("base.safetensors"), &fixtures::base())?;
    for (i, task) in fixtures::tasks().iter().enumerate() {
        write_checkpoint(dir.join(format!("task{}.safetensors", i + 1)), task)?;
    }
    println!("wrote fixtures to {}", dir.display());
    Ok(())
}
