use serde::{Deserialize, Serialize};

use super::Task;
use crate::autodiff::Tensor;
use crate::{Error, Result, Rng, Scalar};

/// Support/query split of a task. Query labels are deliberately not stored:
/// training sees only `support_labels`, and evaluation reads the task.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub support: Vec<usize>,
    pub support_labels: Vec<usize>,
    pub query: Vec<usize>,
    pub shots: usize,
    pub classes: usize,
}

impl Episode {
    /// Support labels as one-hot rows.
    pub fn one_hot<T: Scalar>(&self) -> Tensor<T> {
        let mut out = Tensor::zeros(&[self.support.len(), self.classes]);
        let k = self.classes;
        for (i, &y) in self.support_labels.iter().enumerate() {
            out.data_mut()[i * k + y] = T::one();
        }
        out
    }

    /// Checks disjointness and the per-class support count.
    pub fn validate(&self, task_len: usize) -> Result<()> {
        if self.support.len() != self.support_labels.len() {
            return Err(Error::Episode("support labels do not match support indices".into()));
        }
        if self.query.is_empty() {
            return Err(Error::Episode("query set is empty".into()));
        }
        let mut counts = vec![0usize; self.classes];
        for &y in &self.support_labels {
            if y >= self.classes {
                return Err(Error::Label(format!("support label {y} outside 0..{}", self.classes)));
            }
            counts[y] += 1;
        }
        if let Some(k) = counts.iter().position(|&c| c != self.shots) {
            return Err(Error::Episode(format!(
                "class {k} has {} support samples, expected {}",
                counts[k], self.shots
            )));
        }
        let mut seen = vec![false; task_len];
        for &i in self.support.iter().chain(&self.query) {
            if i >= task_len {
                return Err(Error::Episode(format!("index {i} outside task of {task_len} samples")));
            }
            if seen[i] {
                return Err(Error::Episode(format!("index {i} appears twice")));
            }
            seen[i] = true;
        }
        Ok(())
    }
}

/// Samples `shots` support and `query_per_class` query indices per class,
/// uniformly without replacement. Both lists are class-major.
pub fn split_episode<T: Scalar>(
    task: &Task<T>,
    shots: usize,
    query_per_class: usize,
    rng: &mut Rng,
) -> Result<Episode> {
    if shots == 0 || query_per_class == 0 {
        return Err(Error::Episode("shots and query_per_class must be positive".into()));
    }
    let k = task.classes();
    let mut by_class = vec![Vec::new(); k];
    for (i, &y) in task.labels().iter().enumerate() {
        by_class[y].push(i);
    }
    let need = shots + query_per_class;
    let mut support = Vec::with_capacity(k * shots);
    let mut support_labels = Vec::with_capacity(k * shots);
    let mut query = Vec::with_capacity(k * query_per_class);
    for (class, members) in by_class.iter().enumerate() {
        if members.len() < need {
            return Err(Error::Episode(format!(
                "class {class} has {} samples, need {shots} support + {query_per_class} query",
                members.len()
            )));
        }
        let picked = rng.sample_indices(members.len(), need);
        for (j, &p) in picked.iter().enumerate() {
            if j < shots {
                support.push(members[p]);
                support_labels.push(class);
            } else {
                query.push(members[p]);
            }
        }
    }
    Ok(Episode {
        support,
        support_labels,
        query,
        shots,
        classes: k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{generate_task, GeneratorSpec};

    fn task(classes: usize, per_class: usize, seed: u64) -> Task {
        let spec = GeneratorSpec {
            classes,
            input_dim: 4,
            samples_per_class: per_class,
            ..GeneratorSpec::default()
        };
        generate_task(&spec, &mut Rng::new(seed)).unwrap()
    }

    #[test]
    fn four_shot_ten_way() {
        let t = task(10, 29, 0);
        let ep = split_episode(&t, 4, 25, &mut Rng::new(1)).unwrap();
        assert_eq!(ep.support.len(), 40);
        assert_eq!(ep.query.len(), 250);
        ep.validate(t.len()).unwrap();
        for (&i, &y) in ep.support.iter().zip(&ep.support_labels) {
            assert_eq!(t.labels()[i], y);
        }
    }

    #[test]
    fn minimal_episode() {
        let t = task(2, 2, 3);
        let ep = split_episode(&t, 1, 1, &mut Rng::new(0)).unwrap();
        assert_eq!((ep.support.len(), ep.query.len()), (2, 2));
        assert!(ep.support.iter().all(|i| !ep.query.contains(i)));
    }

    #[test]
    fn same_seed_same_split() {
        let t = task(5, 10, 2);
        let a = split_episode(&t, 2, 3, &mut Rng::new(9)).unwrap();
        let b = split_episode(&t, 2, 3, &mut Rng::new(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn insufficient_samples() {
        let t = task(3, 4, 0);
        assert!(matches!(split_episode(&t, 2, 3, &mut Rng::new(0)), Err(Error::Episode(_))));
        assert!(matches!(split_episode(&t, 0, 3, &mut Rng::new(0)), Err(Error::Episode(_))));
    }

    #[test]
    fn legality_over_many_splits() {
        let t = task(4, 12, 5);
        let mut rng = Rng::new(11);
        for shots in 1..=6 {
            for q in 1..=(12 - shots) {
                let ep = split_episode(&t, shots, q, &mut rng).unwrap();
                ep.validate(t.len()).unwrap();
            }
        }
    }

    #[test]
    fn one_hot_rows() {
        let t = task(3, 3, 0);
        let ep = split_episode(&t, 1, 1, &mut Rng::new(0)).unwrap();
        let z = ep.one_hot::<f64>();
        assert_eq!(z.shape(), &[3, 3]);
        assert_eq!(z, Tensor::identity(3));
    }
}
