//! Writes a state in both snapshot modes and reads it back.

use deepconv::config::RunConfig;
use deepconv::io::{read_snapshot, write_snapshot, SnapshotFile, SnapshotMode};

fn main() -> deepconv::Result<()> {
    let cfg = RunConfig::default();
    let pair = cfg.mesh_pair()?;
    let state = cfg.initial_state(&pair.coarse);
    let dir = std::env::temp_dir().join("deepconv-snapshot-example");
    std::fs::create_dir_all(&dir).map_err(|e| deepconv::Error::io(&dir, e))?;
    let file = SnapshotFile::new(pair.coarse.spec(), state, 7, 0.14, 1.0);
    for mode in [SnapshotMode::Binary, SnapshotMode::Ascii] {
        let path = dir.join(format!("snap.{}", mode.extension()));
        write_snapshot(&path, &file, mode)?;
        let back = read_snapshot(&path)?;
        let size = std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0);
        println!(
            "{mode:?}: {} bytes, step {}, identical: {}",
            size,
            back.header.step,
            back.state == file.state
        );
    }
    Ok(())
}
