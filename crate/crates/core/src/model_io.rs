//! Versioned JSON document for a trained weight model.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::demo::{check_version, parse_json};
use crate::error::{Error, Result};
use crate::weights::{ContractionHead, ModelArch, ThetaParams, Variant, WeightModel};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ModelDocument {
    version: u32,
    arch: ArchDocument,
    params: ParamsDocument,
}

#[derive(Serialize, Deserialize)]
struct ArchDocument {
    variant: Variant,
    hidden_dim: usize,
    groups: Vec<Vec<usize>>,
    blocks: Vec<usize>,
}

/// Matrices are stored flat, row-major.
#[derive(Serialize, Deserialize)]
struct ParamsDocument {
    feature_w: Vec<f64>,
    feature_b: Vec<f64>,
    softmax_w: Vec<f64>,
    softmax_b: Vec<f64>,
    #[serde(default)]
    contraction: Vec<HeadDocument>,
}

#[derive(Serialize, Deserialize)]
struct HeadDocument {
    u_w: Vec<f64>,
    u_b: Vec<f64>,
    v_w: Vec<f64>,
    v_b: f64,
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

pub fn save_model(model: &WeightModel) -> Result<String> {
    let t = &model.theta;
    let doc = ModelDocument {
        version: MODEL_FORMAT_VERSION,
        arch: ArchDocument {
            variant: model.arch.variant,
            hidden_dim: model.arch.hidden_dim,
            groups: model.arch.groups.clone(),
            blocks: model.arch.blocks.clone(),
        },
        params: ParamsDocument {
            feature_w: t.feature_w.as_slice().to_vec(),
            feature_b: t.feature_b.as_slice().to_vec(),
            softmax_w: row_major(&t.softmax_w),
            softmax_b: t.softmax_b.as_slice().to_vec(),
            contraction: t
                .contraction
                .iter()
                .map(|c| HeadDocument {
                    u_w: row_major(&c.u_w),
                    u_b: c.u_b.as_slice().to_vec(),
                    v_w: c.v_w.as_slice().to_vec(),
                    v_b: c.v_b,
                })
                .collect(),
        },
    };
    serde_json::to_string_pretty(&doc).map_err(|e| Error::Schema {
        path: String::new(),
        message: e.to_string(),
    })
}

fn sized(field: String, v: Vec<f64>, len: usize) -> Result<Vec<f64>> {
    if v.len() != len {
        return Err(Error::Schema {
            path: field,
            message: format!("expected {len} values, got {}", v.len()),
        });
    }
    Ok(v)
}

pub fn load_model(text: &str) -> Result<WeightModel> {
    check_version(text, MODEL_FORMAT_VERSION)?;
    let doc: ModelDocument = parse_json(text)?;
    let a = doc.arch;
    let arch = ModelArch::new(a.variant, a.hidden_dim, a.groups, a.blocks)?;
    let (h, k) = (arch.hidden_dim, arch.num_skills());
    let p = doc.params;
    let shapes = arch.contraction_shapes();
    if p.contraction.len() != shapes.len() {
        return Err(Error::Schema {
            path: "params.contraction".into(),
            message: format!("expected {} heads, got {}", shapes.len(), p.contraction.len()),
        });
    }
    let contraction = p
        .contraction
        .into_iter()
        .zip(shapes)
        .enumerate()
        .map(|(i, (c, (r, cols)))| {
            let len = r * cols;
            let field = |f: &str| format!("params.contraction[{i}].{f}");
            Ok(ContractionHead {
                u_w: DMatrix::from_row_slice(len, h, &sized(field("u_w"), c.u_w, len * h)?),
                u_b: DVector::from_vec(sized(field("u_b"), c.u_b, len)?),
                v_w: DVector::from_vec(sized(field("v_w"), c.v_w, h)?),
                v_b: c.v_b,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let theta = ThetaParams {
        feature_w: DVector::from_vec(sized("params.feature_w".into(), p.feature_w, h)?),
        feature_b: DVector::from_vec(sized("params.feature_b".into(), p.feature_b, h)?),
        softmax_w: DMatrix::from_row_slice(k, h, &sized("params.softmax_w".into(), p.softmax_w, k * h)?),
        softmax_b: DVector::from_vec(sized("params.softmax_b".into(), p.softmax_b, k)?),
        contraction,
    };
    WeightModel::new(arch, theta)
}
