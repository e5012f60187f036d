//! JSON documents for trained networks.
//!
//! A network stack is stored as its widths (input first) and its layers,
//! each with a row-major `fan_in x fan_out` weight array, bias and
//! activation tag. Loading re-validates every shape.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Standardizer;
use crate::dcn::{Arm, DcnParams};
use crate::error::{Error, Result};
use crate::nn::{DenseLayer, Mlp};
use crate::propensity::{DropoutSchedule, PropensityModel};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackDocument {
    /// Input width followed by each layer's output width.
    pub widths: Vec<usize>,
    pub layers: Vec<DenseLayer>,
}

impl From<&Mlp> for StackDocument {
    fn from(net: &Mlp) -> Self {
        let mut widths = vec![net.input_dim()];
        widths.extend(net.widths());
        StackDocument {
            widths,
            layers: net.layers().to_vec(),
        }
    }
}

impl TryFrom<StackDocument> for Mlp {
    type Error = Error;

    fn try_from(doc: StackDocument) -> Result<Self> {
        let net = Mlp::new(doc.layers)?;
        let mut widths = vec![net.input_dim()];
        widths.extend(net.widths());
        if widths != doc.widths {
            return Err(Error::invalid(format!(
                "declared widths {:?} do not match layers {:?}",
                doc.widths, widths
            )));
        }
        Ok(net)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityDocument {
    pub schema_version: u32,
    pub network: StackDocument,
    pub standardization: Standardizer,
    pub gamma: f64,
}

impl PropensityDocument {
    pub fn new(model: &PropensityModel, schedule: DropoutSchedule) -> Self {
        PropensityDocument {
            schema_version: SCHEMA_VERSION,
            network: model.net().into(),
            standardization: model.standardizer().clone(),
            gamma: schedule.gamma,
        }
    }

    pub fn into_parts(self) -> Result<(PropensityModel, DropoutSchedule)> {
        check_version(self.schema_version)?;
        let model = PropensityModel::from_parts(self.network.try_into()?, self.standardization)?;
        Ok((model, DropoutSchedule::new(self.gamma)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DcnDocument {
    pub schema_version: u32,
    pub shared: StackDocument,
    pub head0: StackDocument,
    pub head1: StackDocument,
}

impl From<&DcnParams> for DcnDocument {
    fn from(p: &DcnParams) -> Self {
        DcnDocument {
            schema_version: SCHEMA_VERSION,
            shared: p.shared().into(),
            head0: p.head(Arm::Control).into(),
            head1: p.head(Arm::Treated).into(),
        }
    }
}

impl TryFrom<DcnDocument> for DcnParams {
    type Error = Error;

    fn try_from(doc: DcnDocument) -> Result<Self> {
        check_version(doc.schema_version)?;
        DcnParams::new(doc.shared.try_into()?, doc.head0.try_into()?, doc.head1.try_into()?)
    }
}

fn check_version(v: u32) -> Result<()> {
    if v != SCHEMA_VERSION {
        return Err(Error::invalid(format!(
            "unsupported schema_version {v}, expected {SCHEMA_VERSION}"
        )));
    }
    Ok(())
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

pub fn save_propensity(path: impl AsRef<Path>, model: &PropensityModel, schedule: DropoutSchedule) -> Result<()> {
    write_json(path, &PropensityDocument::new(model, schedule))
}

pub fn load_propensity(path: impl AsRef<Path>) -> Result<(PropensityModel, DropoutSchedule)> {
    read_json::<PropensityDocument>(path)?.into_parts()
}

pub fn save_dcn(path: impl AsRef<Path>, params: &DcnParams) -> Result<()> {
    write_json(path, &DcnDocument::from(params))
}

pub fn load_dcn(path: impl AsRef<Path>) -> Result<DcnParams> {
    read_json::<DcnDocument>(path)?.try_into()
}
