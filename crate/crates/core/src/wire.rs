//! JSON bodies of the inference service, shared by server and client.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{PartTransform, SegmentedCloud};
use crate::error::{Error, Result};
use crate::pipeline::PartConstraint;

/// A labelled cloud as `{points: [x0, y0, z0, x1, ...], labels, m}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireCloud {
    pub points: Vec<f64>,
    pub labels: Vec<usize>,
    pub m: usize,
}

impl WireCloud {
    pub fn from_cloud(cloud: &SegmentedCloud) -> Self {
        Self { points: cloud.points().iter().flatten().copied().collect(), labels: cloud.labels().to_vec(), m: cloud.m() }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn to_cloud(&self, class_id: &str) -> Result<SegmentedCloud> {
        if self.points.len() != 3 * self.labels.len() {
            return Err(Error::LengthMismatch(format!("{} coordinates for {} labels", self.points.len(), self.labels.len())));
        }
        let points = self.points.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        SegmentedCloud::new(points, self.labels.clone(), class_id, self.m)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CreateSessionRequest {
    pub cloud: WireCloud,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartInfo {
    pub index: usize,
    pub name: String,
    pub present: bool,
    pub points: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CreateSessionResponse {
    pub session_id: String,
    pub parts: Vec<PartInfo>,
    /// Observed transform per part; `null` for absent parts.
    pub transforms: Vec<Option<PartTransform>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResampleRequest {
    pub parts: Vec<usize>,
    pub seed: u64,
}

/// `assignment` maps a part index to the session it is taken from (this
/// session or one of `donor_session_ids`); unlisted parts stay.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MixRequest {
    pub donor_session_ids: Vec<String>,
    pub assignment: BTreeMap<usize, String>,
    #[serde(default)]
    pub seed: u64,
}

pub const DEFAULT_INTERP_STEPS: usize = 10;

fn default_steps() -> usize {
    DEFAULT_INTERP_STEPS
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InterpolateRequest {
    pub part: usize,
    pub target_session: String,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransformRequest {
    pub constraints: BTreeMap<usize, PartConstraint>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub max_iters: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformResponse {
    #[serde(flatten)]
    pub cloud: WireCloud,
    pub residual: f64,
    pub converged: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub n: usize,
    pub seed: u64,
    /// Points per shape; defaults to the model's budget.
    #[serde(default)]
    pub points: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaResponse {
    pub class_id: String,
    pub m: usize,
    pub part_names: Vec<String>,
    pub connections: Vec<[usize; 2]>,
    pub point_budget: usize,
    pub max_points: usize,
    pub stage: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}
