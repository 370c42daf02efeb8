use rand::Rng;

/// A trainable array with its gradient. The gradient buffer is allocated on
/// first use so that inference-only models carry no gradient memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Vec<f64>,
    grad: Vec<f64>,
}

impl Param {
    pub fn new(value: Vec<f64>) -> Self {
        Self { value, grad: Vec::new() }
    }

    pub fn zeros(len: usize) -> Self {
        Self::new(vec![0.0; len])
    }

    pub fn filled(len: usize, v: f64) -> Self {
        Self::new(vec![v; len])
    }

    /// Uniform in `[-limit, limit]`.
    pub fn uniform<R: Rng + ?Sized>(len: usize, limit: f64, rng: &mut R) -> Self {
        Self::new((0..len).map(|_| rng.random_range(-limit..=limit)).collect())
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut [f64] {
        if self.grad.len() != self.value.len() {
            self.grad = vec![0.0; self.value.len()];
        }
        &mut self.grad
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    /// Value and (allocated) gradient at once.
    pub fn split_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        self.grad_mut();
        (&mut self.value, &mut self.grad)
    }
}

/// What a named array is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    /// Optimized parameter.
    Param,
    /// Non-trainable state (batch-norm running statistics).
    Buffer,
}

/// Uniform traversal over every named array of a model.
pub trait Visit {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &[f64]));
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));
    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Vec<f64>));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Implements [`Visit`] for a struct by delegating to named children.
macro_rules! visit_children {
    ($ty:ty { $($field:ident),* $(,)? } $(, lists { $($list:ident),* $(,)? })?) => {
        impl $crate::nn::param::Visit for $ty {
            fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, $crate::nn::param::TensorKind, &[f64])) {
                $( self.$field.visit(&$crate::nn::param::join(prefix, stringify!($field)), f); )*
                $($( for (i, c) in self.$list.iter().enumerate() {
                    c.visit(&$crate::nn::param::join(prefix, &format!("{}.{}", stringify!($list), i)), f);
                } )*)?
            }
            fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut $crate::nn::param::Param)) {
                $( self.$field.visit_params_mut(&$crate::nn::param::join(prefix, stringify!($field)), f); )*
                $($( for (i, c) in self.$list.iter_mut().enumerate() {
                    c.visit_params_mut(&$crate::nn::param::join(prefix, &format!("{}.{}", stringify!($list), i)), f);
                } )*)?
            }
            fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Vec<f64>)) {
                $( self.$field.visit_buffers_mut(&$crate::nn::param::join(prefix, stringify!($field)), f); )*
                $($( for (i, c) in self.$list.iter_mut().enumerate() {
                    c.visit_buffers_mut(&$crate::nn::param::join(prefix, &format!("{}.{}", stringify!($list), i)), f);
                } )*)?
            }
        }
    };
}
pub(crate) use visit_children;

impl<T: Visit> Visit for Option<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &[f64])) {
        if let Some(t) = self {
            t.visit(prefix, f);
        }
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        if let Some(t) = self {
            t.visit_params_mut(prefix, f);
        }
    }
    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Vec<f64>)) {
        if let Some(t) = self {
            t.visit_buffers_mut(prefix, f);
        }
    }
}

/// Total number of trainable scalars.
pub fn param_count<V: Visit + ?Sized>(model: &V) -> usize {
    let mut n = 0;
    model.visit("", &mut |_, kind, data| {
        if kind == TensorKind::Param {
            n += data.len();
        }
    });
    n
}

pub fn zero_grads<V: Visit + ?Sized>(model: &mut V) {
    model.visit_params_mut("", &mut |_, p| p.zero_grad());
}
