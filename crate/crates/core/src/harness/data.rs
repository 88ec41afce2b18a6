use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::vision::ImageTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    /// Image path relative to the dataset root.
    pub path: String,
    pub label: usize,
    pub caption: String,
    pub image: ImageTensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub class_names: Vec<String>,
    pub train: Vec<Item>,
    pub test: Vec<Item>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn split(&self, split: Split) -> &[Item] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    /// Labels dense in `0..K` and every class present in train.
    pub fn validate(&self) -> Result<()> {
        let k = self.num_classes();
        if k == 0 {
            return Err(Error::Data(format!("dataset `{}` has no classes", self.name)));
        }
        for item in self.train.iter().chain(&self.test) {
            if item.label >= k {
                return Err(Error::Data(format!(
                    "`{}` has label {} but only {k} classes",
                    item.path, item.label
                )));
            }
        }
        for (c, name) in self.class_names.iter().enumerate() {
            if !self.train.iter().any(|i| i.label == c) {
                return Err(Error::Data(format!("class `{name}` has no training items")));
            }
        }
        Ok(())
    }

    /// Train indices grouped by class.
    pub fn train_by_class(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.num_classes()];
        for (i, item) in self.train.iter().enumerate() {
            groups[item.label].push(i);
        }
        groups
    }

    /// The dataset restricted to `classes`, relabeled `0..classes.len()` in that order.
    pub fn subset(&self, classes: &[usize]) -> Result<Dataset> {
        let mut map = vec![None; self.num_classes()];
        for (new, &old) in classes.iter().enumerate() {
            let slot = map
                .get_mut(old)
                .ok_or_else(|| Error::Lookup(format!("class id {old} out of range")))?;
            *slot = Some(new);
        }
        let keep = |items: &[Item]| -> Vec<Item> {
            items
                .iter()
                .filter_map(|it| {
                    map[it.label].map(|label| Item {
                        label,
                        ..it.clone()
                    })
                })
                .collect()
        };
        Ok(Dataset {
            name: self.name.clone(),
            class_names: classes.iter().map(|&c| self.class_names[c].clone()).collect(),
            train: keep(&self.train),
            test: keep(&self.test),
        })
    }
}

/// A `k_shot`-per-class support set drawn from the training split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FewShotTask {
    pub k_shot: usize,
    pub seed: u64,
    /// Selected train indices, one list per class.
    pub per_class: Vec<Vec<usize>>,
}

impl FewShotTask {
    /// All selected indices, class by class.
    pub fn indices(&self) -> Vec<usize> {
        self.per_class.iter().flatten().copied().collect()
    }
}

/// Uniform sampling without replacement inside each class.
pub fn sample_few_shot(dataset: &Dataset, k_shot: usize, seed: u64) -> Result<FewShotTask> {
    if k_shot == 0 {
        return Err(Error::Config("k_shot must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_class = dataset
        .train_by_class()
        .into_iter()
        .enumerate()
        .map(|(c, pool)| {
            if pool.len() < k_shot {
                return Err(Error::Data(format!(
                    "class `{}` has {} training items, {k_shot} requested",
                    dataset.class_names[c],
                    pool.len()
                )));
            }
            let mut picked: Vec<usize> = index::sample(&mut rng, pool.len(), k_shot)
                .into_iter()
                .map(|i| pool[i])
                .collect();
            picked.sort_unstable();
            Ok(picked)
        })
        .collect::<Result<_>>()?;
    Ok(FewShotTask {
        k_shot,
        seed,
        per_class,
    })
}

/// Sorts class names and returns `(base, novel)` class ids: the first
/// `ceil(K/2)` names are base, the rest novel.
pub fn split_base_novel(class_names: &[String]) -> Result<(Vec<usize>, Vec<usize>)> {
    let k = class_names.len();
    if k < 2 {
        return Err(Error::Contract(format!("base/novel split needs >= 2 classes, got {k}")));
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| class_names[a].cmp(&class_names[b]).then(a.cmp(&b)));
    let novel = order.split_off(k.div_ceil(2));
    Ok((order, novel))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dataset(per_class: &[usize]) -> Dataset {
        let img = ImageTensor::new(1, 1, 1, vec![0.0]).unwrap();
        let mut train = Vec::new();
        for (c, &n) in per_class.iter().enumerate() {
            for i in 0..n {
                train.push(Item {
                    path: format!("{c}/{i}.pgm"),
                    label: c,
                    caption: String::new(),
                    image: img.clone(),
                });
            }
        }
        Dataset {
            name: "t".into(),
            class_names: (0..per_class.len()).map(|c| format!("c{c}")).collect(),
            train,
            test: Vec::new(),
        }
    }

    #[test]
    fn one_shot_picks_one_per_class() {
        let d = dataset(&[5, 5, 5, 5]);
        let t = sample_few_shot(&d, 1, 3).unwrap();
        assert_eq!(t.indices().len(), 4);
        for (c, picked) in t.per_class.iter().enumerate() {
            assert_eq!(d.train[picked[0]].label, c);
        }
        assert_eq!(t, sample_few_shot(&d, 1, 3).unwrap());
    }

    #[test]
    fn seeds_change_selection() {
        let d = dataset(&[100]);
        let differs = (0..10u64).any(|trial| {
            let a = sample_few_shot(&d, 4, 1 + 2 * trial).unwrap();
            let b = sample_few_shot(&d, 4, 2 + 2 * trial).unwrap();
            a.per_class != b.per_class
        });
        assert!(differs);
    }

    #[test]
    fn short_class_is_named() {
        let d = dataset(&[5, 2]);
        let err = sample_few_shot(&d, 3, 1).unwrap_err();
        assert!(err.to_string().contains("c1"));
    }

    #[test]
    fn base_novel_split() {
        let names: Vec<String> = ["d", "b", "a", "c"].iter().map(|s| s.to_string()).collect();
        let (base, novel) = split_base_novel(&names).unwrap();
        assert_eq!(base, vec![2, 1]);
        assert_eq!(novel, vec![3, 0]);
        let five: Vec<String> = (0..5).map(|i| i.to_string()).collect();
        let (b, n) = split_base_novel(&five).unwrap();
        assert_eq!((b.len(), n.len()), (3, 2));
        assert!(split_base_novel(&five[..1]).is_err());
    }

    #[test]
    fn subset_relabels() {
        let d = dataset(&[1, 2, 3]);
        let s = d.subset(&[2, 0]).unwrap();
        assert_eq!(s.class_names, vec!["c2", "c0"]);
        assert_eq!(s.train.len(), 4);
        assert!(s.train.iter().all(|i| i.label < 2));
        assert_eq!(s.train_by_class()[0].len(), 3);
    }
}
