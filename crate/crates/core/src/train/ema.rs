use alloc::format;

use crate::error::{Error, Result};
use crate::model::{FusedParams, ModelParams};

/// `teacher = beta * teacher + (1 - beta) * student` on the encoders and the
/// fused head. Student uni-modal heads are not tracked.
pub fn ema_update(teacher: &mut FusedParams, student: &ModelParams, beta: f64) -> Result<()> {
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::InvalidConfig(format!("EMA decay must be in [0, 1), got {beta}")));
    }
    if teacher.encoders.len() != student.encoders.len() {
        return Err(Error::InvalidConfig(format!(
            "teacher tracks {} encoders, student has {}",
            teacher.encoders.len(),
            student.encoders.len()
        )));
    }
    let src = student.fused();
    let pairs = teacher.named_mut().into_iter().zip(src.named());
    let mut checked = alloc::vec::Vec::new();
    for ((name, t), (sname, s)) in pairs {
        if name != sname || !t.same_shape(s) {
            return Err(Error::InvalidConfig(format!(
                "teacher/student drift at {name}: {:?} vs {sname} {:?}",
                t.shape(),
                s.shape()
            )));
        }
        checked.push((t, s));
    }
    for (t, s) in checked {
        for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = beta * *tv + (1.0 - beta) * sv;
        }
    }
    Ok(())
}
