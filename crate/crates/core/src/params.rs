//! Named parameter groups, generic over the leaf type so the same layout
//! holds tensors, tape handles or gradients.

/// Declares a struct of named parameters with `visit`/`map`/`try_map`.
macro_rules! param_group {
    ($(#[$meta:meta])* $name:ident { $($field:ident => $key:literal),* $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name<T = $crate::diffmath::Tensor> {
            $(pub $field: T,)*
        }

        impl<T> $name<T> {
            /// Calls `f` on every parameter with its full name, in a fixed order.
            pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
                $(f(format!("{prefix}{}", $key), &self.$field);)*
            }

            pub fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(String, &T) -> U) -> $name<U> {
                $name { $($field: f(format!("{prefix}{}", $key), &self.$field),)* }
            }

            pub fn try_map<U, E>(
                &self,
                prefix: &str,
                f: &mut dyn FnMut(String, &T) -> Result<U, E>,
            ) -> Result<$name<U>, E> {
                Ok($name { $($field: f(format!("{prefix}{}", $key), &self.$field)?,)* })
            }
        }
    };
}

pub(crate) use param_group;
