//! End-to-end pipeline steps shared by the command line and the acceptance run.

use crate::analysis::{self, CalibrationSet, EvalData, SweepRecord};
use crate::config::{ExperimentConfig, StudentInit};
use crate::corpus::TokenStream;
use crate::distill::{self, LossMode, TrainLog};
use crate::error::Result;
use crate::model::{self, ParameterSet};
use crate::surgery::{self, BlockPartition, OrderPreset, PatchOrder};

pub struct Pipeline {
    pub config: ExperimentConfig,
    pub partition: BlockPartition,
    pub train: TokenStream,
    pub heldout: TokenStream,
}

impl Pipeline {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let partition = config.partition()?;
        let (train, heldout) = config.corpus.load()?;
        log::info!("corpus: {} train / {} held-out tokens", train.len(), heldout.len());
        Ok(Self {
            config,
            partition,
            train,
            heldout,
        })
    }

    pub fn pretrain_teacher(&self) -> Result<(ParameterSet<f32>, TrainLog)> {
        distill::pretrain_teacher(&self.config.model, &self.train, &self.config.teacher_train)
    }

    pub fn init_student(&self, teacher: &ParameterSet<f32>, init: StudentInit, seed: u64) -> Result<ParameterSet<f32>> {
        match init {
            StudentInit::Teacher => surgery::init_student(teacher, &self.partition),
            StudentInit::Random => model::init_random(&teacher.config.with_layers(self.partition.n_blocks()), seed),
        }
    }

    /// Distill `student` under `mode` with the configured optimizer settings and `seed`.
    pub fn distill(
        &self,
        teacher: &ParameterSet<f32>,
        student: ParameterSet<f32>,
        mode: LossMode,
        seed: u64,
    ) -> Result<(ParameterSet<f32>, TrainLog)> {
        let mut tc = self.config.student_train.clone();
        tc.loss_mode = mode;
        tc.seed = seed;
        let w = self.config.weights(self.partition.n_blocks());
        distill::train_student(student, teacher, &self.train, &tc, &w, &self.partition)
    }

    pub fn eval_data(&self) -> EvalData {
        EvalData::new(&self.heldout, &self.config.eval)
    }

    pub fn calibration(&self, count: usize) -> Result<CalibrationSet> {
        let c = &self.config.calibration;
        CalibrationSet::from_stream(&self.heldout, count, c.seq_len, c.seed)
    }

    pub fn resolve_order(
        &self,
        preset: OrderPreset,
        student: &ParameterSet<f32>,
        teacher: &ParameterSet<f32>,
    ) -> Result<PatchOrder> {
        let m = self.partition.n_blocks();
        Ok(match preset {
            OrderPreset::Backward => PatchOrder::backward(m),
            OrderPreset::Forward => PatchOrder::forward(m),
            OrderPreset::Similarity => {
                let calib = self.calibration(self.config.calibration.cosine_samples)?;
                let sim = analysis::cosine_matrix(&analysis::trace(student, &calib)?, &analysis::trace(teacher, &calib)?)?;
                analysis::suggest_patch_order(&sim, &self.partition)?
            }
        })
    }

    pub fn sweep(
        &self,
        student: &ParameterSet<f32>,
        teacher: &ParameterSet<f32>,
        order: &PatchOrder,
        data: &EvalData,
    ) -> Result<Vec<SweepRecord>> {
        analysis::interpolation_sweep_with(
            student,
            teacher,
            &self.partition,
            order,
            &self.config.eval,
            data,
            self.config.patch_options(),
        )
    }
}
