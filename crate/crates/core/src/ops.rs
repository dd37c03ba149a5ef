//! The candidate edge operations: n-gram convolutions, dilated convolutions,
//! stride-1 pooling and the zero map. Each maps `(batch, length, dim)` to the
//! same shape.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{Bindings, ParamGroup, ParamId, ParamStore};
use crate::rng;

/// Candidate operations in canonical order. The order is the tie-break order
/// for architecture derivation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpKind {
    Conv3,
    Conv5,
    Conv7,
    Dilated2,
    Dilated4,
    Dilated6,
    AvgPool,
    MaxPool,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OpFamily {
    Conv,
    DilatedConv,
    Pooling,
    None,
}

/// Window settings of an operation; all absent for the zero map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpSettings {
    pub filter_size: Option<usize>,
    pub padding: Option<usize>,
    pub dilation: Option<usize>,
}

impl OpKind {
    pub const ALL: [OpKind; 9] = [
        OpKind::Conv3,
        OpKind::Conv5,
        OpKind::Conv7,
        OpKind::Dilated2,
        OpKind::Dilated4,
        OpKind::Dilated6,
        OpKind::AvgPool,
        OpKind::MaxPool,
        OpKind::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Conv3 => "Conv3",
            OpKind::Conv5 => "Conv5",
            OpKind::Conv7 => "Conv7",
            OpKind::Dilated2 => "Dilated2",
            OpKind::Dilated4 => "Dilated4",
            OpKind::Dilated6 => "Dilated6",
            OpKind::AvgPool => "AvgPool",
            OpKind::MaxPool => "MaxPool",
            OpKind::None => "None",
        }
    }

    pub fn family(self) -> OpFamily {
        match self {
            OpKind::Conv3 | OpKind::Conv5 | OpKind::Conv7 => OpFamily::Conv,
            OpKind::Dilated2 | OpKind::Dilated4 | OpKind::Dilated6 => OpFamily::DilatedConv,
            OpKind::AvgPool | OpKind::MaxPool => OpFamily::Pooling,
            OpKind::None => OpFamily::None,
        }
    }

    pub fn settings(self) -> OpSettings {
        let (f, p, d) = match self {
            OpKind::Conv3 => (3, 1, None),
            OpKind::Conv5 => (5, 2, None),
            OpKind::Conv7 => (7, 3, None),
            OpKind::Dilated2 => (3, 2, Some(2)),
            OpKind::Dilated4 => (3, 4, Some(4)),
            OpKind::Dilated6 => (3, 6, Some(6)),
            OpKind::AvgPool | OpKind::MaxPool => (3, 1, None),
            OpKind::None => {
                return OpSettings {
                    filter_size: None,
                    padding: None,
                    dilation: None,
                }
            }
        };
        OpSettings {
            filter_size: Some(f),
            padding: Some(p),
            dilation: d,
        }
    }

    pub fn is_conv(self) -> bool {
        matches!(self.family(), OpFamily::Conv | OpFamily::DilatedConv)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown operation kind {s:?}")))
    }
}

impl OpFamily {
    pub const ALL: [OpFamily; 4] = [
        OpFamily::Conv,
        OpFamily::DilatedConv,
        OpFamily::Pooling,
        OpFamily::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpFamily::Conv => "Conv",
            OpFamily::DilatedConv => "DilatedConv",
            OpFamily::Pooling => "Pooling",
            OpFamily::None => "None",
        }
    }

    pub fn kinds(self) -> impl Iterator<Item = OpKind> {
        OpKind::ALL.into_iter().filter(move |k| k.family() == self)
    }
}

impl FromStr for OpFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpFamily::ALL
            .into_iter()
            .find(|f| f.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown operation family {s:?}")))
    }
}

/// One operation instance on an edge, with its parameters if it has any.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Operation {
    pub kind: OpKind,
    pub kernel: Option<ParamId>,
    pub bias: Option<ParamId>,
}

impl Operation {
    /// Creates the operation, registering its kernel `(filter, dim, dim)` and zero
    /// bias `(dim)` under `name` when it is a convolution.
    pub fn init(
        kind: OpKind,
        dim: usize,
        name: &str,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Operation {
        if !kind.is_conv() {
            return Operation {
                kind,
                kernel: None,
                bias: None,
            };
        }
        let f = kind
            .settings()
            .filter_size
            .expect("convolutions have a filter size");
        let bound = rng::fan_bound(f * dim, dim);
        let kernel = store.add(
            format!("{name}.kernel"),
            ParamGroup::Operation,
            rng::uniform(rng, &[f, dim, dim], bound),
        );
        let bias = store.add(
            format!("{name}.bias"),
            ParamGroup::Operation,
            Tensor::zeros(&[dim]),
        );
        Operation {
            kind,
            kernel: Some(kernel),
            bias: Some(bias),
        }
    }

    /// Seeded variant of [`Operation::init`].
    pub fn init_parameters(
        kind: OpKind,
        dim: usize,
        seed: u64,
        name: &str,
        store: &mut ParamStore,
    ) -> Operation {
        Operation::init(kind, dim, name, store, &mut rng::seeded(seed))
    }

    pub fn apply(&self, tape: &mut Tape, params: &Bindings, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(Error::InvalidShape {
                op: "apply",
                msg: format!("{} expects (batch, length, dim), got {shape:?}", self.kind),
            });
        }
        let s = self.kind.settings();
        match self.kind {
            OpKind::None => Ok(tape.constant(Tensor::zeros(&shape))),
            OpKind::AvgPool => tape.avg_pool1d(x, s.filter_size.unwrap(), s.padding.unwrap()),
            OpKind::MaxPool => tape.max_pool1d(x, s.filter_size.unwrap(), s.padding.unwrap()),
            _ => {
                let (Some(kernel), Some(bias)) = (self.kernel, self.bias) else {
                    return Err(Error::invalid(format!("{} has no parameters", self.kind)));
                };
                tape.conv1d(
                    x,
                    params.var(kernel),
                    params.var(bias),
                    s.padding.unwrap(),
                    s.dilation.unwrap_or(1),
                )
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn settings_rows() {
        assert_eq!(OpKind::Conv7.settings().padding, Some(3));
        assert_eq!(OpKind::Dilated4.settings().dilation, Some(4));
        assert_eq!(OpKind::Dilated6.settings().padding, Some(6));
        assert_eq!(OpKind::None.settings().filter_size, None);
        assert_eq!(OpFamily::Pooling.kinds().count(), 2);
    }

    #[test]
    fn parse_round_trip() {
        for k in OpKind::ALL {
            assert_eq!(k.name().parse::<OpKind>().unwrap(), k);
        }
        assert_eq!("pooling".parse::<OpFamily>().unwrap(), OpFamily::Pooling);
        assert!("Transformer".parse::<OpKind>().is_err());
    }

    #[test]
    fn conv3_parameter_shapes() {
        let mut store = ParamStore::new();
        let op = Operation::init_parameters(OpKind::Conv3, 8, 7, "e", &mut store);
        assert_eq!(store.get(op.kernel.unwrap()).shape(), &[3, 8, 8]);
        assert_eq!(store.get(op.bias.unwrap()).shape(), &[8]);
        assert!(store.get(op.bias.unwrap()).data().iter().all(|&b| b == 0.0));
        let bound = (6.0f64 / 32.0).sqrt();
        assert!(store
            .get(op.kernel.unwrap())
            .data()
            .iter()
            .all(|v| v.abs() <= bound));
    }

    #[test]
    fn parameterless_ops() {
        let mut store = ParamStore::new();
        for kind in [OpKind::None, OpKind::AvgPool, OpKind::MaxPool] {
            let op = Operation::init_parameters(kind, 8, 7, "e", &mut store);
            assert!(op.kernel.is_none() && op.bias.is_none());
        }
        assert!(store.is_empty());
    }

    #[test]
    fn equal_seeds_equal_parameters() {
        let mut a = ParamStore::new();
        let mut b = ParamStore::new();
        Operation::init_parameters(OpKind::Dilated2, 5, 42, "e", &mut a);
        Operation::init_parameters(OpKind::Dilated2, 5, 42, "e", &mut b);
        assert_eq!(a, b);
    }
}
