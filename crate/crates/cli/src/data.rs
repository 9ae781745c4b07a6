//! Reading track bundles from dataset directories.

use std::path::Path;

use trackcast_core::bundle::{find_bundles, Bundle, Space};
use trackcast_core::synth::CLEAN_DIR;

use crate::error::{CliError, Result};
use crate::files::dir_name;

/// Named normalized bundles under `root`: either bundle directories directly
/// (pipeline output) or `<clip>/clean` (generator output).
pub fn load_clips(root: &Path) -> Result<Vec<(String, Bundle)>> {
    if !root.is_dir() {
        return Err(CliError::data(format!("{} is not a directory", root.display())));
    }
    let mut paths = find_bundles(root, None)?;
    let nested = paths.is_empty();
    if nested {
        paths = find_bundles(root, Some(CLEAN_DIR))?;
    }
    if paths.is_empty() {
        return Err(CliError::data(format!("no track bundles under {}", root.display())));
    }
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        let name = if nested { dir_name(p.parent().expect("nested bundle")) } else { dir_name(&p) };
        let bundle = Bundle::read(&p)?;
        if bundle.space != Space::Normalized {
            return Err(CliError::data(format!("{}: expected a normalized bundle", p.display())));
        }
        out.push((name, bundle));
    }
    Ok(out)
}

pub fn parse_bucket(s: &str) -> Result<trackcast_core::MotionBucket> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| CliError::config(format!("unknown motion bucket {s:?} (low, medium, high)")))
}
