//! Testbeds: strongly convex quadratics with a known minimizer and a Gaussian
//! gradient noise channel, plus MNIST ingestion from IDX files and seeded
//! minibatching.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use ndarray::Array2;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::nn::{Batch, Targets};
use crate::{Error, ParamVector, Result};

/// `loss(theta) = 0.5 (theta - theta*)^T A (theta - theta*)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexProblem {
    pub a: Array2<f64>,
    pub theta_star: ParamVector,
    /// Smallest eigenvalue of `A`.
    pub mu: f64,
    /// Largest eigenvalue of `A`, the Lipschitz constant of the gradient.
    pub l_lip: f64,
}

impl ConvexProblem {
    pub fn dim(&self) -> usize {
        self.theta_star.len()
    }

    pub fn loss(&self, theta: &ParamVector) -> f64 {
        let e = theta - &self.theta_star;
        0.5 * e.dot(&self.a.dot(&e))
    }

    pub fn grad(&self, theta: &ParamVector) -> ParamVector {
        self.a.dot(&(theta - &self.theta_star))
    }
}

/// Builds `A = Q diag(s) Q^T` with a random orthogonal `Q` and eigenvalues `s`
/// log-spaced in `[1, condition_number]`, so `mu = 1` and
/// `L = condition_number`. A fraction `nonzero_fraction` of the entries of
/// `theta*` (at least one when positive) are standard normal, the rest zero.
pub fn make_quadratic(d: usize, condition_number: f64, nonzero_fraction: f64, seed: u64) -> Result<ConvexProblem> {
    if d == 0 {
        return Err(Error::Empty("quadratic dimension"));
    }
    if !(condition_number >= 1.0 && condition_number.is_finite()) {
        return Err(Error::hyper("condition_number", condition_number, "must be finite and at least 1"));
    }
    if !(0.0..=1.0).contains(&nonzero_fraction) {
        return Err(Error::hyper("nonzero_fraction", nonzero_fraction, "must lie in [0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = DMatrix::<f64>::from_fn(d, d, |_, _| StandardNormal.sample(&mut rng));
    let q = g.qr().q();
    let spectrum: Vec<f64> = (0..d)
        .map(|i| if d == 1 { 1.0 } else { condition_number.powf(i as f64 / (d - 1) as f64) })
        .collect();
    let s = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(spectrum));
    let a = &q * s * q.transpose();
    let a = Array2::from_shape_fn((d, d), |(i, j)| 0.5 * (a[(i, j)] + a[(j, i)]));

    let mut nnz = (nonzero_fraction * d as f64).round() as usize;
    if nonzero_fraction > 0.0 {
        nnz = nnz.max(1);
    }
    let mut theta_star = ParamVector::zeros(d);
    let idx: Vec<usize> = (0..d).collect();
    for &i in idx.choose_multiple(&mut rng, nnz) {
        theta_star[i] = StandardNormal.sample(&mut rng);
    }
    Ok(ConvexProblem {
        a,
        theta_star,
        mu: 1.0,
        l_lip: condition_number,
    })
}

/// Additive isotropic Gaussian gradient noise with `E|xi|^2 = sigma^2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseChannel {
    pub sigma: f64,
}

/// `grad loss(theta) + xi` with `xi ~ N(0, sigma^2 / d I)`.
pub fn noisy_grad<R: Rng + ?Sized>(
    problem: &ConvexProblem,
    channel: &NoiseChannel,
    theta: &ParamVector,
    rng: &mut R,
) -> ParamVector {
    let mut g = problem.grad(theta);
    if channel.sigma > 0.0 {
        let sd = channel.sigma / (problem.dim() as f64).sqrt();
        g.mapv_inplace(|x| {
            let z: f64 = StandardNormal.sample(rng);
            x + sd * z
        });
    }
    g
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Parsed IDX payload: dimensions and raw unsigned bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxData {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

fn idx_err(path: &str, offset: usize, message: impl Into<String>) -> Error {
    Error::Idx {
        path: path.to_string(),
        offset,
        message: message.into(),
    }
}

/// Parses an IDX buffer with unsigned byte payload and the given magic.
pub fn parse_idx(bytes: &[u8], path: &str, magic: u32) -> Result<IdxData> {
    let word = |offset: usize| -> Result<u32> {
        bytes
            .get(offset..offset + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| idx_err(path, bytes.len(), format!("truncated header, expected 4 bytes at offset {offset}")))
    };
    let found = word(0)?;
    if found != magic {
        return Err(idx_err(path, 0, format!("bad magic {found:#010x}, expected {magic:#010x}")));
    }
    let n_dims = (magic & 0xff) as usize;
    let dims = (0..n_dims)
        .map(|i| word(4 + 4 * i).map(|w| w as usize))
        .collect::<Result<Vec<_>>>()?;
    let header = 4 + 4 * n_dims;
    let len: usize = dims.iter().product();
    let available = bytes.len() - header;
    if available < len {
        return Err(idx_err(
            path,
            bytes.len(),
            format!("truncated payload, expected {len} bytes after the header, found {available}"),
        ));
    }
    if available > len {
        return Err(idx_err(path, header + len, format!("{} trailing bytes after the payload", available - len)));
    }
    Ok(IdxData {
        dims,
        data: bytes[header..].to_vec(),
    })
}

/// Serializes an IDX buffer with unsigned byte payload.
pub fn encode_idx(magic: u32, dims: &[usize], data: &[u8]) -> Vec<u8> {
    assert_eq!(dims.iter().product::<usize>(), data.len(), "payload does not match dims");
    assert_eq!((magic & 0xff) as usize, dims.len(), "magic does not match rank");
    let mut out = Vec::with_capacity(4 + 4 * dims.len() + data.len());
    out.extend_from_slice(&magic.to_be_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(data);
    out
}

/// Images as `N x n_features` bytes and their labels. Pixel values are
/// scaled to `[0, 1]` on access.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pixels: Vec<u8>,
    labels: Vec<u8>,
    n_features: usize,
}

impl Dataset {
    pub fn new(pixels: Vec<u8>, labels: Vec<u8>, n_features: usize) -> Result<Self> {
        if n_features == 0 || pixels.len() != labels.len() * n_features {
            return Err(Error::dim("dataset pixels", labels.len() * n_features, pixels.len()));
        }
        Ok(Dataset {
            pixels,
            labels,
            n_features,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn label(&self, i: usize) -> usize {
        usize::from(self.labels[i])
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn raw_image(&self, i: usize) -> &[u8] {
        &self.pixels[i * self.n_features..(i + 1) * self.n_features]
    }

    /// Scaled inputs of the given samples, one per row.
    pub fn inputs(&self, idx: &[usize]) -> Array2<f64> {
        let mut x = Array2::zeros((idx.len(), self.n_features));
        for (mut row, &i) in x.rows_mut().into_iter().zip(idx) {
            for (r, &p) in row.iter_mut().zip(self.raw_image(i)) {
                *r = f64::from(p) / 255.0;
            }
        }
        x
    }

    pub fn labels_of(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.label(i)).collect()
    }

    /// Classification batch.
    pub fn labeled_batch(&self, idx: &[usize]) -> Batch {
        Batch {
            inputs: self.inputs(idx),
            targets: Targets::Labels(self.labels_of(idx)),
        }
    }

    /// First `n_first` samples and the remainder.
    pub fn split(&self, n_first: usize) -> Result<(Dataset, Dataset)> {
        if n_first > self.len() {
            return Err(Error::dim("dataset split", self.len(), n_first));
        }
        let cut = n_first * self.n_features;
        Ok((
            Dataset {
                pixels: self.pixels[..cut].to_vec(),
                labels: self.labels[..n_first].to_vec(),
                n_features: self.n_features,
            },
            Dataset {
                pixels: self.pixels[cut..].to_vec(),
                labels: self.labels[n_first..].to_vec(),
                n_features: self.n_features,
            },
        ))
    }

    /// Images and labels as IDX byte buffers.
    pub fn to_idx(&self, rows: usize, cols: usize) -> (Vec<u8>, Vec<u8>) {
        assert_eq!(rows * cols, self.n_features, "image shape does not match feature count");
        (
            encode_idx(IDX_IMAGES_MAGIC, &[self.len(), rows, cols], &self.pixels),
            encode_idx(IDX_LABELS_MAGIC, &[self.len()], &self.labels),
        )
    }
}

/// Parses image and label IDX buffers into a dataset.
pub fn parse_mnist(images: &[u8], images_path: &str, labels: &[u8], labels_path: &str) -> Result<Dataset> {
    let img = parse_idx(images, images_path, IDX_IMAGES_MAGIC)?;
    let lab = parse_idx(labels, labels_path, IDX_LABELS_MAGIC)?;
    if img.dims[0] != lab.dims[0] {
        return Err(idx_err(
            labels_path,
            4,
            format!("label count {} does not match image count {}", lab.dims[0], img.dims[0]),
        ));
    }
    if let Some(pos) = lab.data.iter().position(|&l| l > 9) {
        return Err(idx_err(labels_path, 8 + pos, format!("label {} out of range 0..=9", lab.data[pos])));
    }
    Dataset::new(img.data, lab.data, img.dims[1] * img.dims[2])
}

pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = fs::read(images_path)?;
    let labels = fs::read(labels_path)?;
    parse_mnist(
        &images,
        &images_path.display().to_string(),
        &labels,
        &labels_path.display().to_string(),
    )
}

pub fn write_mnist_idx(dataset: &Dataset, rows: usize, cols: usize, images_path: &Path, labels_path: &Path) -> Result<()> {
    let (img, lab) = dataset.to_idx(rows, cols);
    fs::write(images_path, img)?;
    fs::write(labels_path, lab)?;
    Ok(())
}

/// Index batches of one epoch: a permutation of `0..n` drawn from the
/// generator seeded with `seed` on stream `epoch`, cut into chunks of
/// `batch_size` with a short last chunk kept.
pub fn batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(Error::Empty("dataset"));
    }
    if batch_size == 0 {
        return Err(Error::hyper("batch_size", 0.0, "must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    Ok(perm.chunks(batch_size).map(<[usize]>::to_vec).collect())
}
