//! Sequential models made of layer modules, the unit of freezing.

use regex::Regex;

use crate::error::{Error, Result};
use crate::nn::layer::{Layer, Mode};
use crate::nn::param::Parameter;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A contiguous group of layers that is frozen and evaluated as a unit.
#[derive(Debug, Clone)]
pub struct LayerModule<T> {
    name: String,
    index: usize,
    layers: Vec<Layer<T>>,
    frozen: bool,
}

impl<T: Scalar> LayerModule<T> {
    pub fn new(name: impl Into<String>, index: usize, layers: Vec<Layer<T>>) -> Self {
        LayerModule {
            name: name.into(),
            index,
            layers,
            frozen: false,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn parameters(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.layers.iter().flat_map(|l| l.parameters())
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.layers.iter_mut().flat_map(|l| l.parameters_mut())
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.layers
            .iter()
            .try_fold(input.to_vec(), |shape, l| l.output_shape(&shape))
            .map_err(|e| self.annotate(e))
    }

    pub fn forward_flops(&self, input: &[usize]) -> Result<u64> {
        let mut shape = input.to_vec();
        let mut flops = 0;
        for l in &self.layers {
            flops += l.forward_flops(&shape)?;
            shape = l.output_shape(&shape)?;
        }
        Ok(flops)
    }

    /// Runs the module. A frozen module always runs in inference mode and keeps
    /// no backward state.
    pub fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mode = if self.frozen { Mode::Inference } else { mode };
        let mut x = self.layers[0]
            .forward(input, mode)
            .map_err(|e| self.annotate(e))?;
        for i in 1..self.layers.len() {
            x = self.layers[i]
                .forward(&x, mode)
                .map_err(|e| self.annotate(e))?;
        }
        Ok(x)
    }

    /// Inference-mode forward that leaves all layer state untouched.
    pub fn infer(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut x = self.layers[0].infer(input).map_err(|e| self.annotate(e))?;
        for l in &self.layers[1..] {
            x = l.infer(&x).map_err(|e| self.annotate(e))?;
        }
        Ok(x)
    }

    pub fn backward(
        &mut self,
        grad: &Tensor<T>,
        need_input_grad: bool,
    ) -> Result<Option<Tensor<T>>> {
        let n = self.layers.len();
        let mut g = grad.clone();
        for i in (0..n).rev() {
            let need = need_input_grad || i > 0;
            match self.layers[i].backward(&g, need)? {
                Some(next) => g = next,
                None => return Ok(None),
            }
        }
        Ok(Some(g))
    }

    fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
        for l in &mut self.layers {
            l.set_mode(if frozen { Mode::Inference } else { Mode::Train });
            l.clear_saved();
            for p in l.parameters_mut() {
                p.set_frozen(frozen);
            }
        }
    }

    fn annotate(&self, e: Error) -> Error {
        match e {
            Error::ShapeMismatch {
                context,
                expected,
                actual,
            } => Error::ShapeMismatch {
                context: format!("module {} ({context})", self.name),
                expected,
                actual,
            },
            other => other,
        }
    }
}

/// A sequential chain of modules. Frozen modules always form a prefix
/// `0..frontmost_active`.
#[derive(Debug, Clone)]
pub struct Model<T> {
    modules: Vec<LayerModule<T>>,
    frontmost_active: usize,
    /// Per-sample input shape (without the batch dimension).
    input_shape: Vec<usize>,
    graph_ready: bool,
}

impl<T: Scalar> Model<T> {
    pub fn new(input_shape: &[usize], modules: Vec<LayerModule<T>>) -> Result<Self> {
        if modules.is_empty() {
            return Err(Error::invalid("a model needs at least one module"));
        }
        for (i, m) in modules.iter().enumerate() {
            if m.index != i {
                return Err(Error::invalid(format!(
                    "module {} has index {}, expected {i}",
                    m.name, m.index
                )));
            }
            if m.layers.is_empty() {
                return Err(Error::invalid(format!("module {} has no layers", m.name)));
            }
        }
        let model = Model {
            modules,
            frontmost_active: 0,
            input_shape: input_shape.to_vec(),
            graph_ready: false,
        };
        model.module_input_shapes(1)?;
        Ok(model)
    }

    /// Groups `layers` into modules by name patterns. Every layer must match
    /// exactly one pattern and each module's layers must be contiguous.
    pub fn from_layers(
        input_shape: &[usize],
        layers: Vec<Layer<T>>,
        patterns: &[(String, String)],
    ) -> Result<Self> {
        let compiled = patterns
            .iter()
            .map(|(name, pat)| {
                Regex::new(pat)
                    .map(|re| (name.clone(), re))
                    .map_err(|e| Error::invalid(format!("module pattern {name}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut modules: Vec<(String, Vec<Layer<T>>)> = Vec::new();
        let mut closed: Vec<String> = Vec::new();
        for layer in layers {
            let matches: Vec<&String> = compiled
                .iter()
                .filter(|(_, re)| re.is_match(layer.name()))
                .map(|(n, _)| n)
                .collect();
            let module = match matches.as_slice() {
                [one] => (*one).clone(),
                [] => {
                    return Err(Error::invalid(format!(
                        "layer {} matches no module pattern",
                        layer.name()
                    )))
                }
                many => {
                    return Err(Error::invalid(format!(
                        "layer {} matches several module patterns: {many:?}",
                        layer.name()
                    )))
                }
            };
            match modules.last_mut() {
                Some((name, group)) if *name == module => group.push(layer),
                _ => {
                    if closed.contains(&module) {
                        return Err(Error::invalid(format!("module {module} is not contiguous")));
                    }
                    if let Some((prev, _)) = modules.last() {
                        closed.push(prev.clone());
                    }
                    modules.push((module, vec![layer]));
                }
            }
        }
        let modules = modules
            .into_iter()
            .enumerate()
            .map(|(i, (name, layers))| LayerModule::new(name, i, layers))
            .collect();
        Model::new(input_shape, modules)
    }

    pub fn modules(&self) -> &[LayerModule<T>] {
        &self.modules
    }

    pub fn module(&self, index: usize) -> Option<&LayerModule<T>> {
        self.modules.get(index)
    }

    pub fn module_mut(&mut self, index: usize) -> Option<&mut LayerModule<T>> {
        self.modules.get_mut(index)
    }

    pub fn num_modules(&self) -> usize {
        self.modules.len()
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn frontmost_active(&self) -> usize {
        self.frontmost_active
    }

    pub fn param_count(&self) -> usize {
        self.modules.iter().map(LayerModule::param_count).sum()
    }

    /// Parameters in modules below the frontmost active one.
    pub fn frozen_param_count(&self) -> usize {
        self.modules[..self.frontmost_active]
            .iter()
            .map(LayerModule::param_count)
            .sum()
    }

    pub fn parameters(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.modules.iter().flat_map(|m| m.parameters())
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.modules.iter_mut().flat_map(|m| m.parameters_mut())
    }

    pub fn active_parameters_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        let start = self.frontmost_active;
        self.modules[start..]
            .iter_mut()
            .flat_map(|m| m.parameters_mut())
    }

    /// Named state tensors: parameters then batchnorm buffers, in layer order.
    pub fn named_state(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for m in &self.modules {
            for l in m.layers() {
                for p in l.parameters() {
                    out.push((p.name.clone(), p.value()));
                }
                out.extend(l.buffers());
            }
        }
        out
    }

    /// Overwrites one named state tensor; shape must match.
    pub fn set_named_state(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        for m in &mut self.modules {
            for l in m.layers_mut() {
                for p in l.parameters_mut() {
                    if p.name == name {
                        return p.set_value(value);
                    }
                }
                for (n, buf) in l.buffers_mut() {
                    if n == name {
                        if buf.shape() != value.shape() {
                            return Err(Error::shape(name, buf.shape(), value.shape()));
                        }
                        *buf = value;
                        return Ok(());
                    }
                }
            }
        }
        Err(Error::invalid(format!("no state tensor named {name}")))
    }

    /// Batched input shape of every module, followed by the output shape.
    pub fn module_input_shapes(&self, batch: usize) -> Result<Vec<Vec<usize>>> {
        let mut shape = Vec::with_capacity(self.input_shape.len() + 1);
        shape.push(batch);
        shape.extend_from_slice(&self.input_shape);
        let mut shapes = vec![shape.clone()];
        for m in &self.modules {
            shape = m.output_shape(&shape)?;
            shapes.push(shape.clone());
        }
        Ok(shapes)
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.rank() != self.input_shape.len() + 1 || x.shape()[1..] != self.input_shape[..] {
            let mut expected = vec![x.batch()];
            expected.extend_from_slice(&self.input_shape);
            return Err(Error::shape("model input", &expected, x.shape()));
        }
        Ok(())
    }

    /// Runs modules `start..end` on `x`, the input to module `start`.
    pub fn forward_range(
        &mut self,
        x: &Tensor<T>,
        start: usize,
        end: usize,
        mode: Mode,
    ) -> Result<Tensor<T>> {
        if start >= end || end > self.modules.len() {
            return Err(Error::invalid(format!(
                "module range {start}..{end} invalid for {} modules",
                self.modules.len()
            )));
        }
        let mut h = self.modules[start].forward(x, mode)?;
        for m in &mut self.modules[start + 1..end] {
            h = m.forward(&h, mode)?;
        }
        Ok(h)
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.forward_hooked(x, mode, None).map(|(y, _)| y)
    }

    /// Full forward pass, also returning the output of module `hook` when set.
    pub fn forward_hooked(
        &mut self,
        x: &Tensor<T>,
        mode: Mode,
        hook: Option<usize>,
    ) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        self.check_input(x)?;
        self.forward_from(x, 0, mode, hook)
    }

    /// Forward pass starting at module `start`, where `x` is that module's input
    /// (e.g. a cached frozen-prefix activation).
    pub fn forward_from(
        &mut self,
        x: &Tensor<T>,
        start: usize,
        mode: Mode,
        hook: Option<usize>,
    ) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        if start >= self.modules.len() {
            return Err(Error::invalid(format!("start module {start} out of range")));
        }
        if mode == Mode::Train && start > self.frontmost_active {
            return Err(Error::invalid(format!(
                "train-mode forward cannot skip active module {}",
                self.frontmost_active
            )));
        }
        let mut hooked = None;
        let mut h = x.clone();
        for i in start..self.modules.len() {
            h = self.modules[i].forward(&h, mode)?;
            if hook == Some(i) {
                hooked = Some(h.clone());
            }
        }
        self.graph_ready = mode == Mode::Train;
        Ok((h, hooked))
    }

    /// Backpropagates the loss gradient through the active modules only. No
    /// gradient is computed at or below the freeze boundary.
    pub fn backward(&mut self, loss_grad: &Tensor<T>) -> Result<()> {
        if !self.graph_ready {
            return Err(Error::BackwardBeforeForward("model".into()));
        }
        self.graph_ready = false;
        let first = self.frontmost_active;
        let mut g = loss_grad.clone();
        for i in (first..self.modules.len()).rev() {
            let need = i > first;
            match self.modules[i].backward(&g, need)? {
                Some(next) => g = next,
                None => break,
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.parameters_mut() {
            p.clear_grad();
        }
    }

    /// Freezes module `index`, which must be the frontmost active one.
    pub fn freeze_module(&mut self, index: usize) -> Result<()> {
        if index != self.frontmost_active {
            return Err(Error::invalid(format!(
                "freeze({index}) rejected: frontmost active module is {}",
                self.frontmost_active
            )));
        }
        if index + 1 >= self.modules.len() {
            return Err(Error::invalid("the last module cannot be frozen"));
        }
        self.modules[index].set_frozen(true);
        self.frontmost_active += 1;
        self.graph_ready = false;
        Ok(())
    }

    pub fn unfreeze_all(&mut self) {
        for m in &mut self.modules {
            m.set_frozen(false);
        }
        self.frontmost_active = 0;
        self.graph_ready = false;
    }

    /// Freezes the first `count` modules; used when restoring checkpoints.
    pub fn set_frontmost_active(&mut self, count: usize) -> Result<()> {
        self.unfreeze_all();
        for i in 0..count {
            self.freeze_module(i)?;
        }
        Ok(())
    }

    /// Copy without backward state or gradients, suitable for handing to another thread.
    pub fn snapshot(&self) -> Self {
        let mut m = self.clone();
        for module in &mut m.modules {
            for l in module.layers_mut() {
                *l = l.snapshot();
            }
        }
        m.graph_ready = false;
        m
    }

    /// Inference-mode output of module `upto` (inclusive), leaving state untouched.
    pub fn infer_upto(&self, x: &Tensor<T>, upto: usize) -> Result<Tensor<T>> {
        self.check_input(x)?;
        if upto >= self.modules.len() {
            return Err(Error::invalid(format!("module {upto} out of range")));
        }
        let mut h = self.modules[0].infer(x)?;
        for m in &self.modules[1..=upto] {
            h = m.infer(&h)?;
        }
        Ok(h)
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.infer_upto(x, self.modules.len() - 1)
    }

    pub fn predict(&mut self, x: &Tensor<T>) -> Result<Vec<usize>> {
        let logits = self.forward(x, Mode::Inference)?;
        Ok(argmax_rows(&logits))
    }
}

pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let k = logits.row_len();
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
