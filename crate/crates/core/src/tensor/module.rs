use super::{Real, Tensor};

pub fn join_name(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// A container of named tensors.
pub trait Module<T: Real> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>);
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>);

    fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.collect("", &mut out);
        out
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        self.collect_mut("", &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.named_tensors_mut().into_iter().map(|(_, t)| t).collect()
    }

    /// Marks every tensor non-trainable.
    fn freeze(&mut self) {
        for t in self.tensors_mut() {
            t.set_requires_grad(false);
        }
    }

    /// Number of trainable scalars.
    fn num_trainable(&self) -> usize {
        self.named_tensors()
            .iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Combined checksum of every tensor, in visiting order.
    fn checksum(&self) -> u64 {
        let mut h = super::Fnv1a::default();
        for (name, t) in self.named_tensors() {
            h.write(name.as_bytes());
            h.write_u64(t.checksum());
        }
        h.finish()
    }
}

impl<T: Real> Module<T> for Tensor<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((prefix.to_string(), self));
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        out.push((prefix.to_string(), self));
    }
}

impl<T: Real, M: Module<T>> Module<T> for Vec<M> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        for (i, m) in self.iter().enumerate() {
            m.collect(&join_name(prefix, &i.to_string()), out);
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        for (i, m) in self.iter_mut().enumerate() {
            m.collect_mut(&join_name(prefix, &i.to_string()), out);
        }
    }
}

impl<T: Real, M: Module<T>> Module<T> for Option<M> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        if let Some(m) = self {
            m.collect(prefix, out);
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        if let Some(m) = self {
            m.collect_mut(prefix, out);
        }
    }
}

/// Implements [`Module`] for a struct by visiting the listed fields in order.
#[macro_export]
macro_rules! impl_module {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl<T: $crate::tensor::Real> $crate::tensor::Module<T> for $ty<T> {
            fn collect<'a>(
                &'a self,
                prefix: &str,
                out: &mut Vec<(String, &'a $crate::tensor::Tensor<T>)>,
            ) {
                $( self.$field.collect(&$crate::tensor::join_name(prefix, stringify!($field)), out); )*
            }

            fn collect_mut<'a>(
                &'a mut self,
                prefix: &str,
                out: &mut Vec<(String, &'a mut $crate::tensor::Tensor<T>)>,
            ) {
                $( self.$field.collect_mut(&$crate::tensor::join_name(prefix, stringify!($field)), out); )*
            }
        }
    };
}
