//! Command-line data sources.

use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{CapiError, Result};
use crate::workbench::synthetic::{parse_num, parse_pairs, SyntheticSpec};

/// `synthetic:<key=value,...>` or a path to an image folder. Synthetic
/// sources accept `count` and `seed` on top of the [`SyntheticSpec`] keys.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic {
        spec: SyntheticSpec,
        count: Option<usize>,
        seed: Option<u64>,
    },
    Folder(PathBuf),
}

impl FromStr for DataSource {
    type Err = CapiError;

    fn from_str(s: &str) -> Result<Self> {
        let Some(rest) = s.strip_prefix("synthetic") else {
            return Ok(Self::Folder(PathBuf::from(s)));
        };
        let rest = rest.strip_prefix(':').unwrap_or(rest);
        let mut count = None;
        let mut seed = None;
        for (k, v) in parse_pairs(rest)? {
            match k {
                "count" => count = Some(parse_num(k, v)?),
                "seed" => seed = Some(parse_num(k, v)?),
                _ => {}
            }
        }
        Ok(Self::Synthetic {
            spec: rest.parse()?,
            count,
            seed,
        })
    }
}
