//! Python bindings for the co-segmentation core.
//!
//! Exposes the dense tensor, the model (forward, single-step training,
//! attention extraction, checkpoints), instant group co-segmentation and the
//! evaluation metrics. Values cross the boundary as flat lists plus shapes.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use coseg_core::data as core_data;
use coseg_core::error::CosegError;
use coseg_core::group as core_group;
use coseg_core::model as core_model;
use coseg_core::tensor::adam::{Adam, AdamHyper};
use coseg_core::{checkpoint, gradcheck, MaskBatch};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn err(e: CosegError) -> PyErr {
    match e {
        CosegError::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Dense tensor: shape plus flat row-major f64 data.
#[pyclass(name = "Tensor", from_py_object)]
#[derive(Clone)]
struct PyTensor {
    inner: coseg_core::Tensor<f64>,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        Ok(PyTensor {
            inner: coseg_core::Tensor::new(shape, data).map_err(err)?,
        })
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    fn tolist(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.numel()
    }

    fn __repr__(&self) -> String {
        format!(
            "Tensor(shape={:?}, numel={})",
            self.inner.shape(),
            self.inner.numel()
        )
    }
}

/// Binary segmentation mask.
#[pyclass(name = "Mask", from_py_object)]
#[derive(Clone)]
struct PyMask {
    inner: core_data::Mask,
}

#[pymethods]
impl PyMask {
    #[new]
    fn new(h: usize, w: usize, data: Vec<u8>) -> PyResult<Self> {
        if data.len() != h * w {
            return Err(PyValueError::new_err(format!(
                "mask needs {} values, got {}",
                h * w,
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(PyValueError::new_err("mask values must be 0 or 1"));
        }
        Ok(PyMask {
            inner: core_data::Mask { h, w, data },
        })
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        (self.inner.h, self.inner.w)
    }

    fn tolist(&self) -> Vec<u8> {
        self.inner.data.clone()
    }

    fn foreground_count(&self) -> usize {
        self.inner.foreground_count()
    }

    fn __repr__(&self) -> String {
        format!(
            "Mask({}x{}, fg={})",
            self.inner.h,
            self.inner.w,
            self.inner.foreground_count()
        )
    }
}

/// The co-segmentation model: siamese encoder, attention learner (ca | fca |
/// csa), decoder, with Adam training state.
#[pyclass(name = "Model")]
struct PyModel {
    model: core_model::CosegModel<f64>,
    opt: Adam<f64>,
    rng: ChaCha8Rng,
}

impl PyModel {
    fn image_tensor(&self, t: &PyTensor, name: &str) -> PyResult<coseg_core::Tensor<f64>> {
        let s = self.model.config.input_size;
        match t.inner.shape() {
            [3, h, w] if *h == s && *w == s => t.inner.reshape(vec![1, 3, s, s]).map_err(err),
            other => Err(PyValueError::new_err(format!(
                "{} must have shape [3,{},{}], got {:?}",
                name, s, s, other
            ))),
        }
    }

    fn mask_batch(&self, mask: &PyMask) -> PyResult<MaskBatch> {
        MaskBatch::new(1, mask.inner.h, mask.inner.w, mask.inner.data.clone()).map_err(err)
    }
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (variant="ca", seed=0, stage_channels=None, convs_per_stage=None, input_size=None, dropout=None, lr=None))]
    fn new(
        variant: &str,
        seed: u64,
        stage_channels: Option<Vec<usize>>,
        convs_per_stage: Option<usize>,
        input_size: Option<usize>,
        dropout: Option<f64>,
        lr: Option<f64>,
    ) -> PyResult<Self> {
        let mut cfg = core_model::ModelConfig {
            variant: core_model::Variant::from_name(variant).map_err(err)?,
            ..core_model::ModelConfig::default()
        };
        if let Some(sc) = stage_channels {
            cfg.stage_channels = sc;
        }
        if let Some(c) = convs_per_stage {
            cfg.convs_per_stage = c;
        }
        if let Some(s) = input_size {
            cfg.input_size = s;
        }
        if let Some(d) = dropout {
            cfg.dropout = d;
        }
        let model = core_model::CosegModel::init(cfg, seed).map_err(err)?;
        Ok(PyModel {
            model,
            opt: Adam::new(AdamHyper {
                lr: lr.unwrap_or(1e-3),
                ..AdamHyper::default()
            }),
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.model.config.variant.name()
    }

    #[getter]
    fn input_size(&self) -> usize {
        self.model.config.input_size
    }

    #[getter]
    fn feature_channels(&self) -> usize {
        self.model.config.feature_channels()
    }

    fn param_count(&self) -> usize {
        self.model.param_count()
    }

    /// Eval-mode pair forward; returns the two logit tensors [1,2,s,s].
    fn forward_pair(
        &mut self,
        image_a: &PyTensor,
        image_b: &PyTensor,
    ) -> PyResult<(PyTensor, PyTensor)> {
        let ia = self.image_tensor(image_a, "image_a")?;
        let ib = self.image_tensor(image_b, "image_b")?;
        let mut g = coseg_core::Graph::new();
        let bound = self.model.bind(&mut g, false);
        let na = g.leaf(ia, false);
        let nb = g.leaf(ib, false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = core_model::forward_pair(
            &mut g,
            &mut self.model,
            &bound,
            na,
            nb,
            coseg_core::Mode::Eval,
            &mut rng,
        )
        .map_err(err)?;
        Ok((
            PyTensor {
                inner: g.value(out.logits_a).clone(),
            },
            PyTensor {
                inner: g.value(out.logits_b).clone(),
            },
        ))
    }

    /// Eval-mode pair prediction; returns the two binary masks.
    fn predict_pair(
        &mut self,
        image_a: &PyTensor,
        image_b: &PyTensor,
    ) -> PyResult<(PyMask, PyMask)> {
        let (la, lb) = self.forward_pair(image_a, image_b)?;
        Ok((
            PyMask {
                inner: core_model::logits_to_masks(&la.inner).remove(0),
            },
            PyMask {
                inner: core_model::logits_to_masks(&lb.inner).remove(0),
            },
        ))
    }

    /// One training step on a single pair; returns the loss.
    fn train_pair(
        &mut self,
        image_a: &PyTensor,
        image_b: &PyTensor,
        mask_a: &PyMask,
        mask_b: &PyMask,
    ) -> PyResult<f64> {
        let batch = core_model::PairBatch {
            img_a: self.image_tensor(image_a, "image_a")?,
            img_b: self.image_tensor(image_b, "image_b")?,
            mask_a: self.mask_batch(mask_a)?,
            mask_b: self.mask_batch(mask_b)?,
        };
        core_model::train_step(&mut self.model, &mut self.opt, &batch, &mut self.rng).map_err(err)
    }

    /// Channel attention vector of one image (length = feature_channels).
    fn attention(&mut self, image: &PyTensor) -> PyResult<Vec<f64>> {
        let img = self.image_tensor(image, "image")?;
        let mut counters = core_group::CallCounters::default();
        let (alpha, _) =
            core_group::generate_attention(&mut self.model, &img, &mut counters).map_err(err)?;
        Ok(alpha)
    }

    /// Re-estimates batchnorm running stats from (image_a, image_b) pairs;
    /// run this after a train_pair loop, before eval-mode prediction.
    fn refresh_stats(&mut self, pairs: Vec<(PyTensor, PyTensor)>) -> PyResult<()> {
        let saved = self.model.config.dropout;
        self.model.config.dropout = 0.0;
        for (a, b) in &pairs {
            let ia = self.image_tensor(a, "image_a")?;
            let ib = self.image_tensor(b, "image_b")?;
            let mut g = coseg_core::Graph::new();
            let bound = self.model.bind(&mut g, false);
            let na = g.leaf(ia, false);
            let nb = g.leaf(ib, false);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let result = core_model::forward_pair(
                &mut g,
                &mut self.model,
                &bound,
                na,
                nb,
                coseg_core::Mode::Train,
                &mut rng,
            );
            self.model.config.dropout = saved;
            result.map_err(err)?;
            self.model.config.dropout = 0.0;
        }
        self.model.config.dropout = saved;
        Ok(())
    }

    /// Instant group co-segmentation; mode is "average" or "minimum".
    /// Returns (masks, counter name/value pairs).
    #[pyo3(signature = (images, mode="average", cache=true))]
    fn instant_group(
        &mut self,
        images: Vec<PyTensor>,
        mode: &str,
        cache: bool,
    ) -> PyResult<(Vec<PyMask>, Vec<(String, usize)>)> {
        let mode = core_group::GroupMode::from_name(mode).map_err(err)?;
        let tensors: Vec<coseg_core::Tensor<f64>> = images
            .iter()
            .map(|t| {
                let s = self.model.config.input_size;
                match t.inner.shape() {
                    [3, h, w] if *h == s && *w == s => Ok(t.inner.clone()),
                    other => Err(PyValueError::new_err(format!(
                        "group images must have shape [3,{},{}], got {:?}",
                        s, s, other
                    ))),
                }
            })
            .collect::<PyResult<_>>()?;
        let result = core_group::instant_group_coseg(&mut self.model, &tensors, mode, cache)
            .map_err(err)?;
        let masks = result
            .masks
            .into_iter()
            .map(|inner| PyMask { inner })
            .collect();
        let counters = vec![
            ("encoder".to_string(), result.counters.encoder),
            ("attention".to_string(), result.counters.attention),
            ("decoder".to_string(), result.counters.decoder),
            ("reductions".to_string(), result.counters.reductions),
        ];
        Ok((masks, counters))
    }

    fn save(&self, path: &str) -> PyResult<()> {
        checkpoint::save(&self.model, Some(&self.opt), std::path::Path::new(path)).map_err(err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let (model, opt) = checkpoint::load::<f64>(std::path::Path::new(path)).map_err(err)?;
        let opt = opt.unwrap_or_else(|| Adam::new(AdamHyper::default()));
        Ok(PyModel {
            model,
            opt,
            rng: ChaCha8Rng::seed_from_u64(0),
        })
    }
}

/// Foreground intersection over union of two masks.
#[pyfunction]
fn jaccard(pred: &PyMask, gt: &PyMask) -> PyResult<f64> {
    core_data::metrics::jaccard(&pred.inner, &gt.inner).map_err(err)
}

/// Fraction of pixels labeled correctly.
#[pyfunction]
fn precision_pixel(pred: &PyMask, gt: &PyMask) -> PyResult<f64> {
    core_data::metrics::precision_pixel(&pred.inner, &gt.inner).map_err(err)
}

/// Generates synthetic sample pairs as dicts with keys image_a, image_b
/// (Tensor [3,s,s]), mask_a, mask_b (Mask), class (str).
#[pyfunction]
#[pyo3(signature = (count=4, canvas=64, seed=7))]
fn synth_pairs(py: Python<'_>, count: usize, canvas: usize, seed: u64) -> PyResult<Vec<Py<pyo3::types::PyDict>>> {
    let cfg = core_data::SyntheticConfig {
        canvas,
        seed,
        train_pairs: count,
        val_pairs: 0,
        test_pairs_per_class: 0,
        ..core_data::SyntheticConfig::default()
    };
    let set = core_data::gen_synthetic_pairset(&cfg).map_err(err)?;
    let mut out = Vec::with_capacity(set.train.len());
    for pair in set.train {
        let dict = pyo3::types::PyDict::new(py);
        dict.set_item(
            "image_a",
            PyTensor {
                inner: pair.image_a.to_tensor::<f64>(),
            },
        )?;
        dict.set_item(
            "image_b",
            PyTensor {
                inner: pair.image_b.to_tensor::<f64>(),
            },
        )?;
        dict.set_item("mask_a", PyMask { inner: pair.mask_a })?;
        dict.set_item("mask_b", PyMask { inner: pair.mask_b })?;
        dict.set_item("class", pair.class.name())?;
        out.push(dict.unbind());
    }
    Ok(out)
}

/// Runs the primitive finite-difference gradient suite; returns
/// (name, max_rel_err) rows.
#[pyfunction]
#[pyo3(signature = (seed=2024))]
fn gradcheck_primitives(seed: u64) -> PyResult<Vec<(String, f64)>> {
    let reports = gradcheck::primitive_suite(seed).map_err(err)?;
    Ok(reports
        .into_iter()
        .map(|r| (r.name, r.max_rel_err))
        .collect())
}

#[pymodule]
fn coseg_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyMask>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(jaccard, m)?)?;
    m.add_function(wrap_pyfunction!(precision_pixel, m)?)?;
    m.add_function(wrap_pyfunction!(synth_pairs, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck_primitives, m)?)?;
    Ok(())
}
