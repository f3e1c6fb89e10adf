//! Layer catalog: a declarative spec for each building block plus a single
//! dispatch entry point used by the shape tests and the gradient checker.

use crate::error::{Error, Result};
use crate::tensor::{NodeId, Tape};

/// Declarative description of one layer.
///
/// The attribute set must be complete and consistent for the kind; call
/// [`LayerSpec::validate`] after construction.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Conv2d { in_channels: usize, out_channels: usize, kernel: usize, stride: usize, pad: usize },
    BatchNorm { channels: usize, eps: f64, momentum: f64 },
    Relu,
    AvgPool2d { window: usize, stride: usize },
    GlobalAvgPool,
    FullyConnected { in_features: usize, out_features: usize },
    Concat,
    Sigmoid,
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, .. } => {
                if in_channels == 0 || out_channels == 0 {
                    return Err(Error::InvalidConfig("conv2d channel counts must be > 0".into()));
                }
                if kernel == 0 || stride == 0 {
                    return Err(Error::InvalidConfig("conv2d kernel/stride must be > 0".into()));
                }
            }
            LayerSpec::BatchNorm { channels, eps, momentum } => {
                if channels == 0 {
                    return Err(Error::InvalidConfig("batch_norm channels must be > 0".into()));
                }
                if eps <= 0.0 || !(0.0..1.0).contains(&momentum) {
                    return Err(Error::InvalidConfig("batch_norm eps/momentum out of range".into()));
                }
            }
            LayerSpec::AvgPool2d { window, stride } => {
                if window == 0 || stride == 0 {
                    return Err(Error::InvalidConfig("avg_pool2d window/stride must be > 0".into()));
                }
            }
            LayerSpec::FullyConnected { in_features, out_features } => {
                if in_features == 0 || out_features == 0 {
                    return Err(Error::InvalidConfig(
                        "fully_connected feature counts must be > 0".into(),
                    ));
                }
            }
            LayerSpec::Relu | LayerSpec::GlobalAvgPool | LayerSpec::Concat | LayerSpec::Sigmoid => {}
        }
        Ok(())
    }

    /// Parameter shapes in declaration order (weights before biases,
    /// batch-norm running statistics last, marked non-trainable).
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>, bool)> {
        match *self {
            LayerSpec::Conv2d { in_channels, out_channels, kernel, .. } => vec![
                ("w", vec![out_channels, in_channels, kernel, kernel], true),
                ("b", vec![out_channels], true),
            ],
            LayerSpec::BatchNorm { channels, .. } => vec![
                ("gamma", vec![channels], true),
                ("beta", vec![channels], true),
                ("running_mean", vec![channels], false),
                ("running_var", vec![channels], false),
            ],
            LayerSpec::FullyConnected { in_features, out_features } => vec![
                ("w", vec![out_features, in_features], true),
                ("b", vec![out_features], true),
            ],
            _ => vec![],
        }
    }
}

/// Apply one layer to its inputs on the tape.
///
/// `params` follows [`LayerSpec::param_shapes`] order. Batch normalization
/// runs in inference mode here, normalizing with the running statistics
/// passed as its last two parameter tensors.
pub fn layer_forward(
    tape: &mut Tape,
    spec: &LayerSpec,
    inputs: &[NodeId],
    params: &[NodeId],
) -> Result<NodeId> {
    spec.validate()?;
    let one_input = |inputs: &[NodeId]| -> Result<NodeId> {
        match inputs {
            [single] => Ok(*single),
            other => Err(Error::WrongArity(format!(
                "layer expects exactly one input, got {}",
                other.len()
            ))),
        }
    };
    match spec {
        LayerSpec::Conv2d { stride, pad, .. } => {
            let x = one_input(inputs)?;
            expect_params(params, 2, "conv2d")?;
            tape.conv2d(x, params[0], params[1], *stride, *pad)
        }
        LayerSpec::BatchNorm { eps, momentum, .. } => {
            let x = one_input(inputs)?;
            expect_params(params, 4, "batch_norm")?;
            let mut stats = crate::tensor::BnStats {
                mean: tape.data(params[2]).to_vec(),
                var: tape.data(params[3]).to_vec(),
            };
            tape.batch_norm(x, params[0], params[1], &mut stats, false, *momentum, *eps)
        }
        LayerSpec::Relu => Ok(tape.relu(one_input(inputs)?)),
        LayerSpec::AvgPool2d { window, stride } => {
            tape.avg_pool2d(one_input(inputs)?, *window, *stride)
        }
        LayerSpec::GlobalAvgPool => tape.global_avg_pool(one_input(inputs)?),
        LayerSpec::FullyConnected { .. } => {
            let x = one_input(inputs)?;
            expect_params(params, 2, "fully_connected")?;
            tape.fully_connected(x, params[0], params[1])
        }
        LayerSpec::Concat => tape.concat_channels(inputs),
        LayerSpec::Sigmoid => Ok(tape.sigmoid(one_input(inputs)?)),
    }
}

fn expect_params(params: &[NodeId], n: usize, kind: &str) -> Result<()> {
    if params.len() != n {
        return Err(Error::WrongArity(format!(
            "{kind} expects {n} parameter tensors, got {}",
            params.len()
        )));
    }
    Ok(())
}
