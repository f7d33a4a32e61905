//! Parameter management, common layers, and the Adam optimizer.
//!
//! All learnable state lives in a [`ParamStore`]; layers hold [`ParamRef`]
//! handles instead of tensors. Each training step binds the store onto a
//! fresh tape ([`Binding::bind`]), runs the forward pass through a
//! [`Fwd`] context, and applies gradients back to the store. Registration
//! order is deterministic, which makes checkpoints byte-stable.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{elem, Elem, GradMap, PoolKind, Result, Tape, Tensor, TensorError, Var};

/// Handle to one named tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamRef(usize);

/// Ordered, named collection of parameters and persistent buffers
/// (batch-norm running statistics).
pub struct ParamStore<E: Elem> {
    names: Vec<String>,
    tensors: Vec<Tensor<E>>,
    trainable: Vec<bool>,
}

impl<E: Elem> Default for ParamStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            trainable: Vec::new(),
        }
    }

    fn insert(&mut self, name: &str, t: Tensor<E>, trainable: bool) -> ParamRef {
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter name {name}"
        );
        self.names.push(name.to_string());
        self.tensors.push(t);
        self.trainable.push(trainable);
        ParamRef(self.tensors.len() - 1)
    }

    /// Register a trainable parameter.
    pub fn add(&mut self, name: &str, t: Tensor<E>) -> ParamRef {
        self.insert(name, t, true)
    }

    /// Register a persistent but non-trainable buffer.
    pub fn add_buffer(&mut self, name: &str, t: Tensor<E>) -> ParamRef {
        self.insert(name, t, false)
    }

    pub fn get(&self, r: ParamRef) -> &Tensor<E> {
        &self.tensors[r.0]
    }

    pub fn get_mut(&mut self, r: ParamRef) -> &mut Tensor<E> {
        &mut self.tensors[r.0]
    }

    /// Two distinct tensors mutably at once (used by batch norm for its
    /// running mean and variance).
    pub fn get2_mut(&mut self, a: ParamRef, b: ParamRef) -> (&mut Tensor<E>, &mut Tensor<E>) {
        assert_ne!(a.0, b.0);
        if a.0 < b.0 {
            let (lo, hi) = self.tensors.split_at_mut(b.0);
            (&mut lo[a.0], &mut hi[0])
        } else {
            let (lo, hi) = self.tensors.split_at_mut(a.0);
            (&mut hi[0], &mut lo[b.0])
        }
    }

    pub fn name(&self, r: ParamRef) -> &str {
        &self.names[r.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn is_trainable(&self, r: ParamRef) -> bool {
        self.trainable[r.0]
    }

    /// All entries in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<E>, bool)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .zip(&self.trainable)
            .map(|((n, t), &tr)| (n.as_str(), t, tr))
    }

    /// Total number of trainable scalar values.
    pub fn trainable_scalars(&self) -> usize {
        self.iter()
            .filter(|(_, _, tr)| *tr)
            .map(|(_, t, _)| t.numel())
            .sum()
    }

    /// Look up a parameter by its registered name.
    pub fn find(&self, name: &str) -> Option<ParamRef> {
        self.names.iter().position(|n| n == name).map(ParamRef)
    }

    /// Overwrite the tensor registered under `name`, enforcing an exact
    /// shape match. Used by checkpoint loading.
    pub fn load_named(&mut self, name: &str, t: Tensor<E>) -> Result<()> {
        let idx = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| TensorError::Invalid(format!("unknown parameter {name}")))?;
        if self.tensors[idx].shape() != t.shape() {
            return Err(TensorError::shape(
                "load_named",
                format!(
                    "{name}: stored {:?}, loading {:?}",
                    self.tensors[idx].shape(),
                    t.shape()
                ),
            ));
        }
        self.tensors[idx] = t;
        Ok(())
    }
}

/// Tape variables for one forward pass, indexed by [`ParamRef`].
/// Trainable parameters become leaves; buffers are not placed on the tape.
pub struct Binding {
    vars: Vec<Option<Var>>,
}

impl Binding {
    /// Bind every trainable parameter of `store` onto `tape`. With
    /// `requires_grad = false` the pass is inference-only.
    pub fn bind<E: Elem>(
        tape: &mut Tape<E>,
        store: &ParamStore<E>,
        requires_grad: bool,
    ) -> Result<Binding> {
        let mut vars = Vec::with_capacity(store.len());
        for i in 0..store.len() {
            if store.trainable[i] {
                vars.push(Some(tape.leaf(&store.tensors[i], requires_grad)?));
            } else {
                vars.push(None);
            }
        }
        Ok(Binding { vars })
    }

    pub fn var(&self, r: ParamRef) -> Var {
        self.vars[r.0].expect("buffer has no tape variable")
    }
}

/// Everything a layer needs during one forward pass.
pub struct Fwd<'a, E: Elem> {
    pub tape: &'a mut Tape<E>,
    pub store: &'a mut ParamStore<E>,
    pub bind: &'a Binding,
    pub train: bool,
}

/// Draw from N(0, std^2).
pub fn normal_init<E: Elem>(
    shape: &[usize],
    std: f64,
    rng: &mut ChaCha8Rng,
) -> Tensor<E> {
    let dist = Normal::new(0.0, std).expect("std must be finite");
    let data: Vec<E> = (0..shape.iter().product::<usize>())
        .map(|_| elem::<E>(dist.sample(rng)))
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Kaiming initialization for a convolution weight: N(0, 2 / fan_in) with
/// fan_in = (cin / groups) * kh * kw, matched to ReLU activations.
pub fn kaiming_conv_weight<E: Elem>(
    cout: usize,
    cin_per_group: usize,
    kh: usize,
    kw: usize,
    rng: &mut ChaCha8Rng,
) -> Tensor<E> {
    let fan_in = (cin_per_group * kh * kw) as f64;
    normal_init(&[cout, cin_per_group, kh, kw], (2.0 / fan_in).sqrt(), rng)
}

/// 2-D convolution layer.
pub struct Conv2d {
    w: ParamRef,
    b: Option<ParamRef>,
    stride: usize,
    pad: usize,
    groups: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<E: Elem>(
        store: &mut ParamStore<E>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        groups: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(groups >= 1 && cin % groups == 0 && cout % groups == 0);
        let w = store.add(
            &format!("{name}.weight"),
            kaiming_conv_weight(cout, cin / groups, k, k, rng),
        );
        let b = bias.then(|| store.add(&format!("{name}.bias"), Tensor::zeros(&[cout])));
        Conv2d {
            w,
            b,
            stride,
            pad,
            groups,
        }
    }

    pub fn forward<E: Elem>(&self, f: &mut Fwd<'_, E>, x: Var) -> Result<Var> {
        let w = f.bind.var(self.w);
        let b = self.b.map(|r| f.bind.var(r));
        f.tape.conv2d(x, w, b, self.stride, self.pad, self.groups)
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Batch normalization over the channel axis of [N, C, H, W].
pub struct BatchNorm2d {
    gamma: ParamRef,
    beta: ParamRef,
    rm: ParamRef,
    rv: ParamRef,
}

impl BatchNorm2d {
    pub fn new<E: Elem>(store: &mut ParamStore<E>, name: &str, c: usize) -> Self {
        let gamma = store.add(&format!("{name}.gamma"), Tensor::full(&[c], elem::<E>(1.0)));
        let beta = store.add(&format!("{name}.beta"), Tensor::zeros(&[c]));
        let rm = store.add_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[c]));
        let rv = store.add_buffer(
            &format!("{name}.running_var"),
            Tensor::full(&[c], elem::<E>(1.0)),
        );
        BatchNorm2d {
            gamma,
            beta,
            rm,
            rv,
        }
    }

    pub fn forward<E: Elem>(&self, f: &mut Fwd<'_, E>, x: Var) -> Result<Var> {
        let g = f.bind.var(self.gamma);
        let b = f.bind.var(self.beta);
        if f.train {
            let (rm, rv) = f.store.get2_mut(self.rm, self.rv);
            f.tape
                .batchnorm_train(x, g, b, rm, rv, BN_EPS, BN_MOMENTUM)
        } else {
            f.tape.batchnorm_eval(
                x,
                g,
                b,
                f.store.get(self.rm),
                f.store.get(self.rv),
                BN_EPS,
            )
        }
    }
}

/// Convolution -> batch norm -> ReLU, the standard block throughout the
/// model. The convolution carries no bias; batch norm supplies the shift.
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBnRelu {
    #[allow(clippy::too_many_arguments)]
    pub fn new<E: Elem>(
        store: &mut ParamStore<E>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let conv = Conv2d::new(
            store,
            &format!("{name}.conv"),
            cin,
            cout,
            k,
            stride,
            pad,
            1,
            false,
            rng,
        );
        let bn = BatchNorm2d::new(store, &format!("{name}.bn"), cout);
        ConvBnRelu { conv, bn }
    }

    pub fn forward<E: Elem>(&self, f: &mut Fwd<'_, E>, x: Var) -> Result<Var> {
        let y = self.conv.forward(f, x)?;
        let y = self.bn.forward(f, y)?;
        f.tape.relu(y)
    }
}

/// Global average pool [N, C, H, W] -> [N, C, 1, 1].
pub fn global_avg_pool<E: Elem>(tape: &mut Tape<E>, x: Var) -> Result<Var> {
    tape.adaptive_pool(x, 1, 1, PoolKind::Avg)
}

/// Adam with decoupled bias correction; moments are kept per trainable
/// parameter in registration order.
pub struct Adam<E: Elem> {
    m: Vec<Option<Vec<E>>>,
    v: Vec<Option<Vec<E>>>,
    t: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<E: Elem> Adam<E> {
    pub fn new(store: &ParamStore<E>) -> Self {
        Adam {
            m: vec![None; store.len()],
            v: vec![None; store.len()],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Apply one update from the gradients of the given binding. Parameters
    /// whose gradient is absent (unreached by the loss) are left untouched.
    pub fn step(
        &mut self,
        store: &mut ParamStore<E>,
        binding: &Binding,
        grads: &GradMap<E>,
        lr: f64,
    ) {
        self.t += 1;
        let b1 = elem::<E>(self.beta1);
        let b2 = elem::<E>(self.beta2);
        let eps = elem::<E>(self.eps);
        let corr1 = elem::<E>(1.0 / (1.0 - self.beta1.powi(self.t as i32)));
        let corr2 = elem::<E>(1.0 / (1.0 - self.beta2.powi(self.t as i32)));
        let lre = elem::<E>(lr);
        for i in 0..store.len() {
            if !store.trainable[i] {
                continue;
            }
            let Some(var) = binding.vars[i] else { continue };
            let Some(g) = grads.get(var) else { continue };
            let n = g.numel();
            let m = self.m[i].get_or_insert_with(|| vec![E::zero(); n]);
            let v = self.v[i].get_or_insert_with(|| vec![E::zero(); n]);
            let p = store.tensors[i].data_mut();
            for j in 0..n {
                let gj = g.data()[j];
                m[j] = b1 * m[j] + (E::one() - b1) * gj;
                v[j] = b2 * v[j] + (E::one() - b2) * gj * gj;
                let mhat = m[j] * corr1;
                let vhat = v[j] * corr2;
                p[j] = p[j] - lre * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
