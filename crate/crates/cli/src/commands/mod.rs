pub mod detect;
pub mod report;
pub mod rl_train;
pub mod sweep;
pub mod train;

use anyhow::Result;
use std::path::Path;

/// Write a file via a temporary sibling and rename, so readers never see a
/// half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
