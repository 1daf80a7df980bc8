use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Cosine,
    CosineWarmRestarts,
    OneCycle,
}

/// Per-epoch learning-rate schedule. Emitted values always lie in
/// [lr_min, lr_max] for epoch < total_epochs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub kind: ScheduleKind,
    pub lr_min: f32,
    pub lr_max: f32,
    /// Restart period for [`ScheduleKind::CosineWarmRestarts`]; ignored
    /// otherwise.
    pub cycle_length: usize,
    pub total_epochs: usize,
}

impl LrSchedule {
    pub fn cosine(lr_max: f32, lr_min: f32, total_epochs: usize) -> Self {
        LrSchedule { kind: ScheduleKind::Cosine, lr_min, lr_max, cycle_length: total_epochs, total_epochs }
    }

    pub fn warm_restarts(lr_max: f32, lr_min: f32, cycle_length: usize, total_epochs: usize) -> Self {
        LrSchedule { kind: ScheduleKind::CosineWarmRestarts, lr_min, lr_max, cycle_length, total_epochs }
    }

    pub fn one_cycle(lr_max: f32, lr_min: f32, total_epochs: usize) -> Self {
        LrSchedule { kind: ScheduleKind::OneCycle, lr_min, lr_max, cycle_length: total_epochs, total_epochs }
    }

    pub fn lr_at(&self, epoch: usize) -> Result<f32> {
        if epoch >= self.total_epochs {
            return Err(Error::arg(
                "lr_at",
                format!("epoch {epoch} out of range (total {})", self.total_epochs),
            ));
        }
        let half = 0.5 * (self.lr_max - self.lr_min);
        let cos_span = |t: f32, span: f32| {
            self.lr_min + half * (1.0 + (std::f32::consts::PI * t / span).cos())
        };
        Ok(match self.kind {
            ScheduleKind::Cosine => cos_span(epoch as f32, self.total_epochs as f32),
            ScheduleKind::CosineWarmRestarts => {
                let t_cur = epoch % self.cycle_length;
                cos_span(t_cur as f32, self.cycle_length as f32)
            }
            ScheduleKind::OneCycle => {
                // Linear warmup to lr_max over the first 30% of epochs,
                // then cosine decay back to lr_min.
                let warm = ((0.3 * self.total_epochs as f64).round() as usize).max(1);
                if epoch < warm {
                    self.lr_min + (self.lr_max - self.lr_min) * (epoch as f32 / warm as f32)
                } else {
                    let span = (self.total_epochs - warm) as f32;
                    cos_span((epoch - warm) as f32, span.max(1.0))
                }
            }
        })
    }
}
