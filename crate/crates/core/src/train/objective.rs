use crate::data::TabularDataset;
use crate::dynamics::{windows, DynamicalModel, SequenceBatch};
use crate::error::{Error, Result};
use crate::models::{Elbo, ElboBreakdown, RegressionModel};
use crate::ndcore::Tape;
use crate::params::{Binding, ParamGroup, ParamStore};
use crate::rng::NoiseStream;

/// Something the trainer can maximize by minibatches of data units.
pub trait Objective {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    /// Size of the data set in minibatch units (points or windows).
    fn num_units(&self) -> usize;
    /// Groups trained during the warm-start phase.
    fn warm_start_groups(&self) -> &'static [ParamGroup];
    fn mc_samples(&self) -> usize;
    /// Minibatch ELBO for the units `batch`, scaled to the full data set.
    fn elbo<'t>(&self, params: &Binding<'t>, batch: &[usize], c: f64, stream: &NoiseStream) -> Result<Elbo<'t>>;
    /// Full-data ELBO (c = 1) with `samples` paths.
    fn estimate(&self, samples: usize, stream: &NoiseStream) -> Result<ElboBreakdown>;
}

pub struct RegressionObjective<'a> {
    pub model: &'a mut RegressionModel,
    pub data: &'a TabularDataset,
}

impl<'a> RegressionObjective<'a> {
    pub fn new(model: &'a mut RegressionModel, data: &'a TabularDataset) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if data.x.cols() != model.input_dim() || data.y.cols() != model.output_dim() {
            return Err(Error::Schema(format!(
                "model expects {} features and {} targets, data has {} and {}",
                model.input_dim(),
                model.output_dim(),
                data.x.cols(),
                data.y.cols()
            )));
        }
        Ok(RegressionObjective { model, data })
    }
}

impl Objective for RegressionObjective<'_> {
    fn params(&self) -> &ParamStore {
        &self.model.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.model.params
    }

    fn num_units(&self) -> usize {
        self.data.len()
    }

    fn warm_start_groups(&self) -> &'static [ParamGroup] {
        &[ParamGroup::Output, ParamGroup::OutputInducing, ParamGroup::Likelihood]
    }

    fn mc_samples(&self) -> usize {
        self.model.config.flow.mc_samples
    }

    fn elbo<'t>(&self, params: &Binding<'t>, batch: &[usize], c: f64, stream: &NoiseStream) -> Result<Elbo<'t>> {
        let x = self.data.x.select_rows(batch);
        let y = self.data.y.select_rows(batch);
        let scale = self.data.len() as f64 / batch.len() as f64;
        self.model.elbo(params, &x, &y, c, scale, self.mc_samples(), stream)
    }

    fn estimate(&self, samples: usize, stream: &NoiseStream) -> Result<ElboBreakdown> {
        self.model.elbo_estimate(&self.data.x, &self.data.y, 1.0, samples, stream)
    }
}

/// Windows of one long series are the minibatch units.
pub struct DynamicsObjective<'a> {
    pub model: &'a mut DynamicalModel,
    pub series: &'a SequenceBatch,
    windows: Vec<std::ops::Range<usize>>,
}

impl<'a> DynamicsObjective<'a> {
    pub fn new(model: &'a mut DynamicalModel, series: &'a SequenceBatch) -> Result<Self> {
        series.validate()?;
        if series.dim() != model.obs_dim() {
            return Err(Error::Schema(format!(
                "model observes {} series, data has {}",
                model.obs_dim(),
                series.dim()
            )));
        }
        let windows = windows(series.len(), model.config.window);
        if let Some(id) = model.initial_states {
            if model.params.value(id).rows() != windows.len() {
                return Err(Error::Schema("series does not match the model's training windows".into()));
            }
        }
        Ok(DynamicsObjective { model, series, windows })
    }

    fn window_elbo<'t>(&self, params: &Binding<'t>, batch: &[usize], c: f64, stream: &NoiseStream, samples: usize) -> Result<Elbo<'t>> {
        let mut parts = Vec::with_capacity(batch.len());
        for &k in batch {
            let w = self.windows.get(k).ok_or_else(|| Error::contract(format!("window {k} out of range")))?;
            let slice = self.series.slice(w.clone());
            parts.push((w.len(), self.model.sequence_elbo(params, &slice, Some(k), c, 1.0, samples, &stream.child(k as u64))?));
        }
        let observed: usize = parts.iter().map(|p| p.0).sum();
        let mut ell = parts[0].1.expected_loglik;
        for p in &parts[1..] {
            ell = ell.add(p.1.expected_loglik)?;
        }
        let first = parts[0].1;
        Elbo::assemble(
            ell,
            first.kl_g,
            first.kl_f,
            first.kl_sigma,
            c,
            self.series.len() as f64 / observed as f64,
        )
    }
}

impl Objective for DynamicsObjective<'_> {
    fn params(&self) -> &ParamStore {
        &self.model.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.model.params
    }

    fn num_units(&self) -> usize {
        self.windows.len()
    }

    fn warm_start_groups(&self) -> &'static [ParamGroup] {
        &[
            ParamGroup::Output,
            ParamGroup::OutputInducing,
            ParamGroup::Observation,
            ParamGroup::InitialState,
        ]
    }

    fn mc_samples(&self) -> usize {
        self.model.config.model.flow.mc_samples
    }

    fn elbo<'t>(&self, params: &Binding<'t>, batch: &[usize], c: f64, stream: &NoiseStream) -> Result<Elbo<'t>> {
        self.window_elbo(params, batch, c, stream, self.mc_samples())
    }

    fn estimate(&self, samples: usize, stream: &NoiseStream) -> Result<ElboBreakdown> {
        let tape = Tape::new();
        let params = self.model.params.bind_constant(&tape);
        let all: Vec<usize> = (0..self.windows.len()).collect();
        Ok(self.window_elbo(&params, &all, 1.0, stream, samples)?.breakdown())
    }
}
