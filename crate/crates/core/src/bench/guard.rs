use std::cell::Cell;

use crate::error::{Error, Result};

use super::stream::TaskInstance;

/// Owns the raw training split of every task. Closing a task drops its data;
/// any later read is refused and counted.
#[derive(Debug)]
pub struct RehearsalGuard {
    slots: Vec<Option<Vec<TaskInstance>>>,
    closed: Vec<bool>,
    refused: Cell<usize>,
}

impl RehearsalGuard {
    /// `train[t - 1]` is the training split of task `t`.
    pub fn new(train: Vec<Vec<TaskInstance>>) -> Self {
        let n = train.len();
        RehearsalGuard {
            slots: train.into_iter().map(Some).collect(),
            closed: vec![false; n],
            refused: Cell::new(0),
        }
    }

    pub fn read(&self, task: usize) -> Result<&[TaskInstance]> {
        let i = task.checked_sub(1).filter(|&i| i < self.slots.len()).ok_or_else(|| Error::Input(format!("no task {task}")))?;
        if self.closed[i] {
            self.refused.set(self.refused.get() + 1);
            return Err(Error::ContractViolation(format!("training data of task {task} read after the task closed")));
        }
        Ok(self.slots[i].as_deref().expect("open slot holds data"))
    }

    pub fn close(&mut self, task: usize) {
        if let Some(i) = task.checked_sub(1).filter(|&i| i < self.slots.len()) {
            self.slots[i] = None;
            self.closed[i] = true;
        }
    }

    pub fn is_closed(&self, task: usize) -> bool {
        task.checked_sub(1).and_then(|i| self.closed.get(i).copied()).unwrap_or(false)
    }

    /// Reads attempted on closed tasks so far.
    pub fn refused_reads(&self) -> usize {
        self.refused.get()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst() -> TaskInstance {
        TaskInstance {
            tokens: vec![0, 1],
            e1_pos: 0,
            e2_pos: 1,
            label: 0,
        }
    }

    #[test]
    fn read_after_close_is_a_violation() {
        let mut g = RehearsalGuard::new(vec![vec![inst()], vec![inst(), inst()]]);
        assert_eq!(g.read(2).unwrap().len(), 2);
        g.close(1);
        assert!(g.is_closed(1));
        assert!(matches!(g.read(1), Err(Error::ContractViolation(_))));
        assert_eq!(g.refused_reads(), 1);
        assert!(g.read(2).is_ok());
        assert!(matches!(g.read(3), Err(Error::Input(_))));
    }
}
