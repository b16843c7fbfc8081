//! Derived input streams: joint (identity), bone (parent-relative), motion
//! (frame difference).

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::{DataError, SkeletonSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    Joint,
    Bone,
    Motion,
}

impl std::str::FromStr for Stream {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "joint" => Ok(Self::Joint),
            "bone" => Ok(Self::Bone),
            "motion" => Ok(Self::Motion),
            other => Err(format!("unknown stream {other:?} (joint|bone|motion)")),
        }
    }
}

impl std::fmt::Display for Stream {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Joint => "joint",
            Self::Bone => "bone",
            Self::Motion => "motion",
        })
    }
}

/// Derive an input stream from a sequence; shape is preserved.
///
/// - joint: identity copy
/// - bone: `x[:, :, v] - x[:, :, parent(v)]`, root bone all zeros
/// - motion: `x[:, t+1, :] - x[:, t, :]`, last frame zero-padded
pub fn derive_stream(x: &SkeletonSequence, stream: Stream) -> Result<SkeletonSequence, DataError> {
    let (c_n, t_n, v_n) = x.data.dim();
    let data = match stream {
        Stream::Joint => x.data.clone(),
        Stream::Bone => {
            if x.graph.parents.iter().all(|p| p.is_none()) && v_n > 1 {
                return Err(DataError::MissingParents);
            }
            let mut out = Array3::zeros((c_n, t_n, v_n));
            for v in 0..v_n {
                if let Some(p) = x.graph.parents[v] {
                    for c in 0..c_n {
                        for t in 0..t_n {
                            out[[c, t, v]] = x.data[[c, t, v]] - x.data[[c, t, p]];
                        }
                    }
                }
            }
            out
        }
        Stream::Motion => {
            let mut out = Array3::zeros((c_n, t_n, v_n));
            for c in 0..c_n {
                for t in 0..t_n - 1 {
                    for v in 0..v_n {
                        out[[c, t, v]] = x.data[[c, t + 1, v]] - x.data[[c, t, v]];
                    }
                }
            }
            out
        }
    };
    Ok(SkeletonSequence { data, graph: x.graph.clone(), label: x.label })
}
