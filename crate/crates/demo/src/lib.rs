//! Browser bindings: train a small field, fit its Koopman generator, then
//! sample in one step at any time and inspect the generator's spectrum.
//! [`Engine`] holds the logic in plain Rust; [`Demo`] is its JS face.

use kflow::analysis::spectral_decompose;
use kflow::cfm::{integrate_endpoint, CfmTrainConfig, CfmTrainer, ConditionalPath, OdeMethod, VectorFieldModel};
use kflow::checkpoint::Checkpoint;
use kflow::datasets::Distribution2D;
use kflow::koopman::{
    CurriculumSchedule, DataSource, EncoderConfig, KoopmanData, KoopmanModel, KoopmanTrainConfig,
    KoopmanTrainer,
};
use kflow::linalg::eig;
use kflow::nn::MlpSpec;
use kflow::sampler::koopman_sample;
use wasm_bindgen::prelude::*;

/// Sizes that keep one training call well under a frame budget.
const FIELD_SPEC: MlpSpec = MlpSpec::new(3, 32, 3, 2);
const FIELD_BATCH: usize = 128;

enum Stage {
    Field(Box<CfmTrainer>),
    Koopman {
        field: VectorFieldModel,
        trainer: Box<KoopmanTrainer>,
    },
    Loaded {
        field: VectorFieldModel,
        koopman: KoopmanModel,
    },
}

pub struct Engine {
    prior: Distribution2D,
    target: Distribution2D,
    seed: u64,
    stage: Stage,
}

impl Engine {
    pub fn new(target: &str, seed: u64) -> Result<Self, String> {
        let prior = Distribution2D::Gauss;
        let target: Distribution2D = target.parse().map_err(|e: kflow::datasets::DataError| e.to_string())?;
        let cfg = CfmTrainConfig {
            spec: FIELD_SPEC,
            path: ConditionalPath::ot(),
            batch: FIELD_BATCH,
            seed,
            ..Default::default()
        };
        let trainer = CfmTrainer::new(prior, target, cfg).map_err(|e| e.to_string())?;
        Ok(Self {
            prior,
            target,
            seed,
            stage: Stage::Field(Box::new(trainer)),
        })
    }

    /// Runs `steps` field updates; returns their mean loss.
    pub fn train_field(&mut self, steps: usize) -> Result<f64, String> {
        let Stage::Field(t) = &mut self.stage else {
            return Err("the field is frozen once Koopman training starts".into());
        };
        let mut sum = 0.0;
        for _ in 0..steps {
            sum += t.step().map_err(|e| e.to_string())?;
        }
        Ok(sum / steps.max(1) as f64)
    }

    pub fn field_steps(&self) -> usize {
        match &self.stage {
            Stage::Field(t) => t.steps_done(),
            _ => 0,
        }
    }

    /// Freezes the field and builds a Koopman trainer on it.
    pub fn start_koopman(&mut self, p_learned: usize, epochs: usize) -> Result<(), String> {
        let field = self.field().clone();
        let cfg = KoopmanTrainConfig {
            encoder: EncoderConfig { p_learned, hidden: 32, depth: 2 },
            schedule: CurriculumSchedule { epochs, ..Default::default() },
            source: DataSource::UniformDomain { n_pairs: 5000, half_width: 8.0 },
            batch: 128,
            n_traj: 512,
            seed: self.seed,
            ..Default::default()
        };
        let data = KoopmanData::build(&field, &self.prior, &cfg).map_err(|e| e.to_string())?;
        let trainer = KoopmanTrainer::new(data, cfg).map_err(|e| e.to_string())?;
        self.stage = Stage::Koopman { field, trainer: Box::new(trainer) };
        Ok(())
    }

    /// Runs up to `steps` Koopman updates; returns the latest validation
    /// generator loss.
    pub fn train_koopman(&mut self, steps: usize) -> Result<f64, String> {
        let Stage::Koopman { trainer, .. } = &mut self.stage else {
            return Err("start Koopman training first".into());
        };
        for _ in 0..steps {
            if trainer.is_done() {
                break;
            }
            trainer.step().map_err(|e| e.to_string())?;
        }
        Ok(trainer.report().final_val_generator)
    }

    pub fn koopman_progress(&self) -> f64 {
        match &self.stage {
            Stage::Koopman { trainer, .. } => trainer.steps_done() as f64 / trainer.total_steps() as f64,
            Stage::Loaded { .. } => 1.0,
            Stage::Field(_) => 0.0,
        }
    }

    /// Replaces everything with checkpoints written by the command line.
    pub fn load(&mut self, field: &[u8], koopman: &[u8]) -> Result<(), String> {
        let field = Checkpoint::from_bytes(field)
            .and_then(|c| c.to_vector_field())
            .map_err(|e| e.to_string())?;
        let ck = Checkpoint::from_bytes(koopman).map_err(|e| e.to_string())?;
        if let Some(task) = &ck.meta.task {
            self.prior = task.prior.parse().map_err(|e: kflow::datasets::DataError| e.to_string())?;
            self.target = task.target.parse().map_err(|e: kflow::datasets::DataError| e.to_string())?;
        }
        let koopman = ck.to_koopman().map_err(|e| e.to_string())?;
        self.stage = Stage::Loaded { field, koopman };
        Ok(())
    }

    fn field(&self) -> &VectorFieldModel {
        match &self.stage {
            Stage::Field(t) => t.model(),
            Stage::Koopman { field, .. } | Stage::Loaded { field, .. } => field,
        }
    }

    fn koopman(&self) -> Result<&KoopmanModel, String> {
        match &self.stage {
            Stage::Koopman { trainer, .. } => Ok(trainer.model()),
            Stage::Loaded { koopman, .. } => Ok(koopman),
            Stage::Field(_) => Err("no Koopman model yet".into()),
        }
    }

    /// One-step samples at time `t`, flattened `x0, y0, x1, y1, ...`.
    pub fn sample(&self, n: usize, t: f64, seed: u64) -> Result<Vec<f64>, String> {
        let run = koopman_sample(self.koopman()?, &self.prior, n, &[t], seed).map_err(|e| e.to_string())?;
        Ok(run.last().data().to_vec())
    }

    /// RK4 endpoints of the field from the same prior draws as [`Self::sample`].
    pub fn sample_field(&self, n: usize, steps: usize, seed: u64) -> Result<Vec<f64>, String> {
        let x0 = self.prior.sample(n, seed);
        let x1 = integrate_endpoint(self.field(), &x0, steps.max(1), OdeMethod::Rk4).map_err(|e| e.to_string())?;
        Ok(x1.data().to_vec())
    }

    pub fn target_points(&self, n: usize, seed: u64) -> Vec<f64> {
        self.target.sample(n, seed).data().to_vec()
    }

    /// Generator eigenvalues as `re, im` pairs, largest real part first.
    pub fn spectrum(&self) -> Result<Vec<f64>, String> {
        let m = self.koopman()?;
        let pairs = match spectral_decompose(m.generator(), &vec![0.0; m.p_total()]) {
            Ok(d) => d.pairs,
            // a near-defective generator still has eigenvalues worth showing
            Err(_) => eig(m.generator()).map_err(|e| e.to_string())?.sorted_by_real_desc(),
        };
        Ok(pairs.values.iter().flat_map(|c| [c.re, c.im]).collect())
    }
}

#[wasm_bindgen]
pub struct Demo(Engine);

fn js(e: String) -> JsError {
    JsError::new(&e)
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(target: &str, seed: u32) -> Result<Demo, JsError> {
        Engine::new(target, seed as u64).map(Demo).map_err(js)
    }

    #[wasm_bindgen(js_name = trainField)]
    pub fn train_field(&mut self, steps: usize) -> Result<f64, JsError> {
        self.0.train_field(steps).map_err(js)
    }

    #[wasm_bindgen(js_name = fieldSteps)]
    pub fn field_steps(&self) -> usize {
        self.0.field_steps()
    }

    #[wasm_bindgen(js_name = startKoopman)]
    pub fn start_koopman(&mut self, p_learned: usize, epochs: usize) -> Result<(), JsError> {
        self.0.start_koopman(p_learned, epochs).map_err(js)
    }

    #[wasm_bindgen(js_name = trainKoopman)]
    pub fn train_koopman(&mut self, steps: usize) -> Result<f64, JsError> {
        self.0.train_koopman(steps).map_err(js)
    }

    #[wasm_bindgen(js_name = koopmanProgress)]
    pub fn koopman_progress(&self) -> f64 {
        self.0.koopman_progress()
    }

    #[wasm_bindgen(js_name = loadCheckpoints)]
    pub fn load_checkpoints(&mut self, field: &[u8], koopman: &[u8]) -> Result<(), JsError> {
        self.0.load(field, koopman).map_err(js)
    }

    pub fn sample(&self, n: usize, t: f64, seed: u32) -> Result<Vec<f64>, JsError> {
        self.0.sample(n, t, seed as u64).map_err(js)
    }

    #[wasm_bindgen(js_name = sampleField)]
    pub fn sample_field(&self, n: usize, steps: usize, seed: u32) -> Result<Vec<f64>, JsError> {
        self.0.sample_field(n, steps, seed as u64).map_err(js)
    }

    #[wasm_bindgen(js_name = targetPoints)]
    pub fn target_points(&self, n: usize, seed: u32) -> Vec<f64> {
        self.0.target_points(n, seed as u64)
    }

    pub fn spectrum(&self) -> Result<Vec<f64>, JsError> {
        self.0.spectrum().map_err(js)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn staged_workflow() {
        let mut e = Engine::new("8g", 1).unwrap();
        assert!(e.sample(4, 1.0, 0).is_err());
        let loss = e.train_field(5).unwrap();
        assert!(loss.is_finite());
        assert_eq!(e.field_steps(), 5);
        e.start_koopman(4, 1).unwrap();
        assert!(e.train_field(1).is_err());
        let val = e.train_koopman(10).unwrap();
        assert!(val.is_finite());
        let s = e.sample(16, 0.5, 3).unwrap();
        assert_eq!(s.len(), 32);
        assert_eq!(e.sample_field(16, 10, 3).unwrap().len(), 32);
        let spec = e.spectrum().unwrap();
        assert_eq!(spec.len(), 2 * 8);
        assert!(spec.chunks(2).collect::<Vec<_>>().windows(2).all(|w| w[0][0] >= w[1][0]));
    }

    #[test]
    fn loads_command_line_checkpoints() {
        let mut e = Engine::new("2m", 0).unwrap();
        let field = VectorFieldModel::new(FIELD_SPEC, 2).unwrap();
        let koop = KoopmanModel::new(EncoderConfig { p_learned: 2, hidden: 4, depth: 1 }, 2, 0.01).unwrap();
        let task = kflow::checkpoint::TaskInfo { prior: "gauss".into(), target: "8g".into(), path: "ot".into() };
        let fb = Checkpoint::from_vector_field(&field, 2, Some(task.clone())).to_bytes();
        let kb = Checkpoint::from_koopman(&koop, 2, Some(task)).to_bytes();
        e.load(&fb, &kb).unwrap();
        assert_eq!(e.koopman_progress(), 1.0);
        assert_eq!(e.sample(3, 1.0, 1).unwrap().len(), 6);
        assert!(e.load(&kb[..10], &kb).is_err());
    }
}
