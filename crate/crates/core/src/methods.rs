//! Connection methods by name, with the inputs each one needs.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::connect_direct::{arc_connect, arc_connect_rows, endpoint_center, linear_connect, row_centers};
use crate::connect_learnable::{connect_with_flow, CouplingFlow, FlowOrigin};
use crate::connect_ot::ot_connect;
use crate::connect_wa::{wa_connect_multilayer, ScaffoldMethod, WaBase, WaConfig};
use crate::error::{Error, Result};
use crate::ndmath::Matrix;
use crate::netcore::WeightVector;
use crate::paths::ConnectionPath;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Method {
    Linear,
    Arc,
    RnvpFlow,
    RnvpBijection,
    Ot,
    Scaffold(ScaffoldMethod),
}

impl Method {
    pub const ALL: [Method; 11] = [
        Method::Linear,
        Method::Arc,
        Method::RnvpFlow,
        Method::RnvpBijection,
        Method::Ot,
        Method::Scaffold(ScaffoldMethod::Wa(WaBase::Linear)),
        Method::Scaffold(ScaffoldMethod::Wa(WaBase::Arc)),
        Method::Scaffold(ScaffoldMethod::Wa(WaBase::Ot)),
        Method::Scaffold(ScaffoldMethod::Butterfly(WaBase::Linear)),
        Method::Scaffold(ScaffoldMethod::Butterfly(WaBase::Arc)),
        Method::Scaffold(ScaffoldMethod::Butterfly(WaBase::Ot)),
    ];

    /// The flow training this method expects, if any.
    pub fn flow_origin(self) -> Option<FlowOrigin> {
        match self {
            Method::RnvpFlow => Some(FlowOrigin::Nll),
            Method::RnvpBijection => Some(FlowOrigin::Bijection),
            _ => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Linear => f.write_str("linear"),
            Method::Arc => f.write_str("arc"),
            Method::RnvpFlow => f.write_str("rnvp-flow"),
            Method::RnvpBijection => f.write_str("rnvp-bijection"),
            Method::Ot => f.write_str("ot"),
            Method::Scaffold(m) => m.fmt(f),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL.into_iter().find(|m| m.to_string() == s).ok_or_else(|| {
            let names: Vec<String> = Method::ALL.iter().map(Method::to_string).collect();
            Error::invalid(format!("unknown method '{s}', expected one of {}", names.join(", ")))
        })
    }
}

impl TryFrom<String> for Method {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Method> for String {
    fn from(m: Method) -> String {
        m.to_string()
    }
}

/// Inputs shared by the methods: adjustment features for the scaffold
/// methods and a trained flow for the flow methods.
#[derive(Clone, Default)]
pub struct ConnectInputs {
    pub adjust_features: Option<Arc<Matrix>>,
    pub wa: WaConfig,
    pub flow: Option<Arc<CouplingFlow>>,
}

/// Builds the named connection. Single-layer methods act on hidden layer 1
/// of a one-hidden network; on deeper networks `linear` moves all weights
/// on a line, `arc` moves every weight row on an arc around its layer's row
/// mean, and the particle methods are unavailable (use a scaffold variant).
pub fn connect(method: Method, a: &WeightVector, b: &WeightVector, inputs: &ConnectInputs) -> Result<ConnectionPath> {
    a.same_architecture(b)?;
    let one_hidden = a.depth() == 2;
    match method {
        Method::Linear => linear_connect(a, b),
        Method::Arc if one_hidden => arc_connect(a, b, 1, &endpoint_center(a, b, 1)?),
        Method::Arc => arc_connect_rows(a, b, &row_centers(a, b)?),
        Method::Ot if one_hidden => Ok(ot_connect(a, b, 1)?.0),
        Method::RnvpFlow | Method::RnvpBijection if one_hidden => {
            let flow = inputs
                .flow
                .clone()
                .ok_or_else(|| Error::invalid(format!("method {method} needs a trained flow")))?;
            if Some(flow.origin()) != method.flow_origin() {
                return Err(Error::invalid(format!(
                    "method {method} given a flow of kind {}",
                    flow.origin().method_name()
                )));
            }
            connect_with_flow(a, b, 1, flow)
        }
        Method::Ot | Method::RnvpFlow | Method::RnvpBijection => Err(Error::invalid(format!(
            "method {method} connects one-hidden networks only; this one has {} hidden layers",
            a.depth() - 1
        ))),
        Method::Scaffold(m) => {
            let x = inputs
                .adjust_features
                .as_ref()
                .ok_or_else(|| Error::invalid(format!("method {method} needs adjustment data")))?;
            wa_connect_multilayer(a, b, m, &inputs.wa, x)
        }
    }
}
