use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{BatchStats, Bound, ConvOptions, Graph, ModelParams, NnError, NormMode, PaddingMode, Tensor, Var};

/// One layer of a toy network. Parameterized kinds own tensors named
/// `{name}.weight`, `{name}.bias` (conv, linear) or `{name}.gamma`,
/// `{name}.beta`, `{name}.running_mean`, `{name}.running_var` (norm).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        #[serde(default)]
        padding_mode: PaddingMode,
    },
    Relu,
    Sigmoid,
    MaxPool2,
    Upsample2,
    /// Channel-concatenates a skip tensor with `skip_channels` channels after the input.
    ConcatSkip {
        skip_channels: usize,
    },
    Linear {
        in_features: usize,
        out_features: usize,
    },
    BatchNorm {
        channels: usize,
    },
}

impl LayerSpec {
    /// Size-preserving (at stride 1) convolution with `padding = (kernel - 1) / 2`.
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: (kernel.saturating_sub(1)) / 2,
            padding_mode: PaddingMode::Zero,
        }
    }

    /// As [`LayerSpec::conv`] with edge-replicating padding.
    pub fn conv_replicate(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        match Self::conv(in_channels, out_channels, kernel, stride) {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                padding_mode: PaddingMode::Replicate,
            },
            _ => unreachable!(),
        }
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, NnError> {
        let nchw = || match input {
            [n, c, h, w] => Ok((*n, *c, *h, *w)),
            s => Err(NnError::Shape(format!("{self:?} expects NCHW input, got {s:?}"))),
        };
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => {
                let (n, c, h, w) = nchw()?;
                if c != in_channels {
                    return Err(NnError::Shape(format!("conv expects {in_channels} channels, got {c}")));
                }
                if kernel % 2 == 0 || stride == 0 {
                    return Err(NnError::Shape(format!(
                        "invalid conv kernel {kernel} / stride {stride}"
                    )));
                }
                let out = |d: usize| -> Result<usize, NnError> {
                    let span = d + 2 * padding;
                    if span < kernel {
                        return Err(NnError::Shape(format!(
                            "conv kernel {kernel} larger than padded input {span}"
                        )));
                    }
                    Ok((span - kernel) / stride + 1)
                };
                Ok(vec![n, out_channels, out(h)?, out(w)?])
            }
            LayerSpec::Relu | LayerSpec::Sigmoid => Ok(input.to_vec()),
            LayerSpec::MaxPool2 => {
                let (n, c, h, w) = nchw()?;
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(NnError::Shape(format!("maxpool2 needs even dims, got {h}x{w}")));
                }
                Ok(vec![n, c, h / 2, w / 2])
            }
            LayerSpec::Upsample2 => {
                let (n, c, h, w) = nchw()?;
                Ok(vec![n, c, 2 * h, 2 * w])
            }
            LayerSpec::ConcatSkip { skip_channels } => {
                let (n, c, h, w) = nchw()?;
                Ok(vec![n, c + skip_channels, h, w])
            }
            LayerSpec::Linear {
                in_features,
                out_features,
            } => match input {
                [n, f] if *f == in_features => Ok(vec![*n, out_features]),
                s => Err(NnError::Shape(format!("linear expects [N, {in_features}], got {s:?}"))),
            },
            LayerSpec::BatchNorm { channels } => {
                let (_, c, _, _) = nchw()?;
                if c != channels {
                    return Err(NnError::Shape(format!("norm expects {channels} channels, got {c}")));
                }
                Ok(input.to_vec())
            }
        }
    }

    /// Inserts freshly initialized tensors for this layer into `params`.
    pub fn init<R: Rng + ?Sized>(&self, name: &str, params: &mut ModelParams, rng: &mut R) -> Result<(), NnError> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => {
                let w = kaiming_uniform(
                    vec![out_channels, in_channels, kernel, kernel],
                    in_channels * kernel * kernel,
                    rng,
                );
                params.insert(format!("{name}.weight"), w)?;
                params.insert(
                    format!("{name}.bias"),
                    Tensor::zeros(vec![out_channels]).requires_grad(true),
                )?;
            }
            LayerSpec::Linear {
                in_features,
                out_features,
            } => {
                let w = kaiming_uniform(vec![out_features, in_features], in_features, rng);
                params.insert(format!("{name}.weight"), w)?;
                params.insert(
                    format!("{name}.bias"),
                    Tensor::zeros(vec![out_features]).requires_grad(true),
                )?;
            }
            LayerSpec::BatchNorm { channels } => {
                let ones = Tensor::new(vec![channels], vec![1.0; channels])?;
                params.insert(format!("{name}.gamma"), ones.clone().requires_grad(true))?;
                params.insert(
                    format!("{name}.beta"),
                    Tensor::zeros(vec![channels]).requires_grad(true),
                )?;
                params.insert(format!("{name}.running_mean"), Tensor::zeros(vec![channels]))?;
                params.insert(format!("{name}.running_var"), ones)?;
            }
            _ => {}
        }
        Ok(())
    }

    pub fn forward(&self, ctx: &mut ForwardCtx, name: &str, x: Var, skip: Option<Var>) -> Result<Var, NnError> {
        let g = &mut ctx.graph;
        match *self {
            LayerSpec::Conv2d {
                stride,
                padding,
                padding_mode,
                ..
            } => {
                let w = ctx.bound.get(&format!("{name}.weight"))?;
                let b = ctx.bound.get(&format!("{name}.bias"))?;
                let opts = ConvOptions {
                    stride,
                    padding,
                    padding_mode,
                };
                g.conv2d(x, w, Some(b), opts)
            }
            LayerSpec::Relu => g.relu(x),
            LayerSpec::Sigmoid => g.sigmoid(x),
            LayerSpec::MaxPool2 => g.maxpool2(x),
            LayerSpec::Upsample2 => g.upsample2(x),
            LayerSpec::ConcatSkip { skip_channels } => {
                let s =
                    skip.ok_or_else(|| NnError::InvalidArgument(format!("{name}: concat-skip needs a skip input")))?;
                if g.shape(s).get(1) != Some(&skip_channels) {
                    return Err(NnError::Shape(format!(
                        "{name}: skip has shape {:?}, expected {skip_channels} channels",
                        g.shape(s)
                    )));
                }
                g.concat(x, s)
            }
            LayerSpec::Linear { .. } => {
                let w = ctx.bound.get(&format!("{name}.weight"))?;
                let b = ctx.bound.get(&format!("{name}.bias"))?;
                g.linear(x, w, Some(b))
            }
            LayerSpec::BatchNorm { .. } => {
                let gamma = ctx.bound.get(&format!("{name}.gamma"))?;
                let beta = ctx.bound.get(&format!("{name}.beta"))?;
                if ctx.training {
                    let (y, stats) = g.batch_norm(x, gamma, beta, NormMode::Batch)?;
                    ctx.stats.push((name.to_string(), stats));
                    Ok(y)
                } else {
                    let rm = g.value(ctx.bound.get(&format!("{name}.running_mean"))?).to_vec();
                    let rv = g.value(ctx.bound.get(&format!("{name}.running_var"))?).to_vec();
                    let (y, _) = g.batch_norm(x, gamma, beta, NormMode::Frozen(&rm, &rv))?;
                    Ok(y)
                }
            }
        }
    }
}

/// Uniform in `±sqrt(6 / fan_in)`, trainable.
pub fn kaiming_uniform<R: Rng + ?Sized>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("finite init").requires_grad(true)
}

/// Graph, parameter handles and collected batch statistics for one forward pass.
pub struct ForwardCtx {
    pub graph: Graph,
    pub bound: Bound,
    /// Batch-statistics normalization when true; running statistics otherwise.
    pub training: bool,
    pub stats: Vec<(String, BatchStats)>,
}

impl ForwardCtx {
    pub fn new(params: &ModelParams, training: bool) -> Self {
        let mut graph = Graph::new();
        let bound = params.bind(&mut graph);
        Self {
            graph,
            bound,
            training,
            stats: Vec::new(),
        }
    }

    pub fn input(&mut self, t: &Tensor) -> Var {
        self.graph.leaf(t)
    }

    /// Backpropagates `loss`, accumulates gradients into `params` and folds the
    /// batch statistics into the running ones.
    pub fn finish(mut self, params: &mut ModelParams, loss: Var, momentum: f64) -> Result<f64, NnError> {
        let value = self.graph.scalar(loss);
        self.graph.backward(loss)?;
        params.accumulate_grads(&self.graph, &self.bound)?;
        for (name, stats) in &self.stats {
            params.update_running_stats(name, stats, momentum)?;
        }
        Ok(value)
    }
}

/// A linear chain of named layers; `ConcatSkip` is not supported here.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Sequential {
    pub layers: Vec<(String, LayerSpec)>,
}

impl Sequential {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(mut self, name: impl Into<String>, layer: LayerSpec) -> Self {
        self.layers.push((name.into(), layer));
        self
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, NnError> {
        self.layers
            .iter()
            .try_fold(input.to_vec(), |shape, (_, l)| l.output_shape(&shape))
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut ModelParams, rng: &mut R) -> Result<(), NnError> {
        self.layers.iter().try_for_each(|(name, l)| l.init(name, params, rng))
    }

    pub fn forward(&self, ctx: &mut ForwardCtx, x: Var) -> Result<Var, NnError> {
        self.forward_until(ctx, x, None).map(|(v, _)| v)
    }

    /// Runs layers in order, stopping after the layer named `stop` if given.
    /// Returns the last output and whether `stop` was reached.
    pub fn forward_until(&self, ctx: &mut ForwardCtx, mut x: Var, stop: Option<&str>) -> Result<(Var, bool), NnError> {
        for (name, layer) in &self.layers {
            x = layer.forward(ctx, name, x, None)?;
            if stop == Some(name.as_str()) {
                return Ok((x, true));
            }
        }
        Ok((x, stop.is_none()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::ModelMeta;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn same_padding_preserves_size() {
        for k in [1, 3, 5, 7] {
            let l = LayerSpec::conv(2, 4, k, 1);
            assert_eq!(l.output_shape(&[1, 2, 9, 6]).unwrap(), vec![1, 4, 9, 6]);
        }
        assert_eq!(
            LayerSpec::conv(1, 8, 3, 2).output_shape(&[1, 1, 64, 64]).unwrap(),
            vec![1, 8, 32, 32]
        );
    }

    #[test]
    fn declared_shape_matches_forward() {
        let net = Sequential::new()
            .push("c1", LayerSpec::conv(1, 4, 3, 1))
            .push("n1", LayerSpec::BatchNorm { channels: 4 })
            .push("r1", LayerSpec::Relu)
            .push("p1", LayerSpec::MaxPool2)
            .push("c2", LayerSpec::conv_replicate(4, 2, 3, 2))
            .push("u1", LayerSpec::Upsample2)
            .push("s", LayerSpec::Sigmoid);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = ModelParams::new(ModelMeta::new("t"));
        net.init(&mut params, &mut rng).unwrap();
        let input = [2, 1, 8, 8];
        for training in [true, false] {
            let mut ctx = ForwardCtx::new(&params, training);
            let x =
                ctx.input(&Tensor::new(input.to_vec(), (0..128).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap());
            let y = net.forward(&mut ctx, x).unwrap();
            assert_eq!(ctx.graph.shape(y), net.output_shape(&input).unwrap().as_slice());
            assert_eq!(ctx.stats.len(), usize::from(training));
        }
    }

    #[test]
    fn kaiming_bound_respected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = kaiming_uniform(vec![16, 8, 3, 3], 72, &mut rng);
        let b = (6.0f64 / 72.0).sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= b));
        assert!(t.data().iter().any(|v| v.abs() > 0.5 * b));
    }
}
