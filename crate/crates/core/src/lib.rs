//! Input-space slope of ReLU classifiers: the operator norm of the
//! network's input Jacobian at a point, averaged over data.
//!
//! The crate trains small dense and convolutional networks with momentum
//! SGD, measures slopes along training, and runs the experiment grids that
//! study how slope depends on training time, architecture, seed, input
//! resolution and neighbourhood radius.
//!
//! ```
//! use slope_core::linalg::{Matrix, PNorm};
//! use slope_core::nn::{Activation, Network, NetworkSpec};
//! use slope_core::slope::slope_at;
//!
//! // x -> W x through an identity hidden layer
//! let w = Matrix::from_rows(&[vec![1.0, -2.0], vec![3.0, 4.0]]);
//! let spec = NetworkSpec::dense(2, &[2], 2).with_activation(Activation::Identity);
//! let net = Network::from_layers(spec, 0, vec![(Matrix::identity(2), vec![0.0; 2]), (w, vec![0.0; 2])]).unwrap();
//! assert_eq!(slope_at(&net, &[0.5, 0.5], PNorm::One).unwrap(), 6.0);
//! assert_eq!(slope_at(&net, &[0.5, 0.5], PNorm::Infinity).unwrap(), 7.0);
//! ```

pub mod data;
pub mod experiments;
pub mod linalg;
pub mod nn;
pub mod rng;
pub mod slope;
pub mod stats;
pub mod train;
pub mod verify;
