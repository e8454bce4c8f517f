use crate::corpus::{FeatureMatrix, LabelTag, Sample};

/// Dense column-major view of a sample set restricted to the selected features.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<String>,
    columns: Vec<Vec<f64>>,
    labels: Vec<LabelTag>,
}

impl Dataset {
    pub fn from_matrix(matrix: &FeatureMatrix, features: &[String]) -> Self {
        Self::from_samples(&matrix.samples, features)
    }

    pub fn from_samples(samples: &[Sample], features: &[String]) -> Self {
        let columns = features
            .iter()
            .map(|f| samples.iter().map(|s| s.count(f) as f64).collect())
            .collect();
        Dataset {
            features: features.to_vec(),
            columns,
            labels: samples.iter().map(Sample::tag).collect(),
        }
    }

    /// Builds a dataset from row-major values.
    pub fn from_rows(features: Vec<String>, rows: &[Vec<f64>], labels: Vec<LabelTag>) -> Self {
        assert_eq!(rows.len(), labels.len(), "one label per row");
        assert!(rows.iter().all(|r| r.len() == features.len()), "row width must match features");
        let columns = (0..features.len())
            .map(|j| rows.iter().map(|r| r[j]).collect())
            .collect();
        Dataset {
            features,
            columns,
            labels,
        }
    }

    pub fn features(&self) -> &[String] {
        &self.features
    }

    pub fn labels(&self) -> &[LabelTag] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.features.len()
    }

    pub fn value(&self, feature: usize, sample: usize) -> f64 {
        self.columns[feature][sample]
    }

    pub fn row(&self, sample: usize) -> Vec<f64> {
        self.columns.iter().map(|c| c[sample]).collect()
    }

    /// Rows at `indices`, in that order; repeated indices are repeated rows.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.clone(),
            columns: self
                .columns
                .iter()
                .map(|c| indices.iter().map(|&i| c[i]).collect())
                .collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}
