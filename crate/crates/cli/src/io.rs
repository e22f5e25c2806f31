//! Trace files.

use std::io::Write;
use std::path::Path;

use anyhow::Context;
use noisy_fedavg::engine::RoundTrace;
use serde::Serialize;

pub const TRACE_COLUMNS: [&str; 12] = [
    "t",
    "sq_dist",
    "loss",
    "eta",
    "sigma2_ul",
    "zeta2_dl",
    "rho_ul",
    "rho_dl",
    "div_ul",
    "div_dl",
    "snr_global",
    "energy_cum",
];

/// Write `bytes` to a sibling temporary file, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let dir = path
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let name = path.file_name().context("output path has no file name")?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = std::fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(())
}

/// `# key: <json>` lines preceding the CSV header.
pub fn header_lines<C: Serialize, K: Serialize>(config: &C, constants: &K) -> anyhow::Result<String> {
    Ok(format!(
        "# config: {}\n# constants: {}\n",
        serde_json::to_string(config)?,
        serde_json::to_string(constants)?
    ))
}

pub fn trace_csv(header: &str, rows: &[RoundTrace]) -> anyhow::Result<Vec<u8>> {
    let mut buf = header.as_bytes().to_vec();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        for r in rows {
            w.serialize(r)?;
        }
        if rows.is_empty() {
            w.write_record(TRACE_COLUMNS)?;
        }
        w.flush()?;
    }
    Ok(buf)
}

pub fn read_trace(path: &Path) -> anyhow::Result<Vec<RoundTrace>> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let rows = r.deserialize().collect::<Result<Vec<RoundTrace>, _>>()?;
    Ok(rows)
}

/// Value of a `# key:` header line.
pub fn read_header(path: &Path, key: &str) -> anyhow::Result<Option<serde_json::Value>> {
    let text = std::fs::read_to_string(path)?;
    let prefix = format!("# {key}: ");
    for line in text.lines().take_while(|l| l.starts_with('#')) {
        if let Some(rest) = line.strip_prefix(&prefix) {
            return Ok(Some(serde_json::from_str(rest)?));
        }
    }
    Ok(None)
}
