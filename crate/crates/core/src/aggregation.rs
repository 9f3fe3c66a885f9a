//! Layer divergence feedback, per-layer top-n client selection, layer-wise
//! weighted aggregation, FedAvg, and the random selection baselines.
//!
//! Matrices are indexed `[layer][client]`, with clients in the order the
//! participants were passed in. All sums run in ascending client index and
//! then ascending parameter index, so an all-ones selection reproduces FedAvg
//! bit for bit.

use rand::Rng;
use thiserror::Error;

use crate::nn::{LayeredModel, ParameterLayer};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AggregationError {
    #[error("model {index} does not match the reference shape")]
    ShapeMismatch { index: usize },
    #[error("no models to aggregate")]
    NoModels,
    #[error("{models} models but {sizes} dataset sizes")]
    SizeCountMismatch { models: usize, sizes: usize },
    #[error("client {index} has an empty dataset")]
    ZeroSize { index: usize },
    #[error("selection count {n} out of range [1, {clients}]")]
    SelectionOutOfRange { n: usize, clients: usize },
    #[error("layer {layer} selects {found} clients, expected {expected}")]
    BadRowSum {
        layer: usize,
        expected: usize,
        found: usize,
    },
    #[error("selection is {rows}x{cols}, expected {layers}x{clients}")]
    SelectionShape {
        rows: usize,
        cols: usize,
        layers: usize,
        clients: usize,
    },
    #[error("divergence for layer {layer}, client {client} is not a finite non-negative value")]
    InvalidDivergence { layer: usize, client: usize },
}

/// Euclidean distance of every layer (weights and bias together).
pub fn layer_divergence(
    local: &LayeredModel,
    global_ref: &LayeredModel,
) -> Result<Vec<f64>, AggregationError> {
    if !local.same_shape(global_ref) {
        return Err(AggregationError::ShapeMismatch { index: 0 });
    }
    Ok(local
        .layers()
        .iter()
        .zip(global_ref.layers())
        .map(|(a, b)| {
            a.params()
                .zip(b.params())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        })
        .collect())
}

/// Per-layer divergences of each participant, `values[layer][client]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceMatrix {
    values: Vec<Vec<f64>>,
    client_ids: Vec<usize>,
}

impl DivergenceMatrix {
    pub fn new(values: Vec<Vec<f64>>, client_ids: Vec<usize>) -> Result<Self, AggregationError> {
        for (l, row) in values.iter().enumerate() {
            if row.len() != client_ids.len() {
                return Err(AggregationError::SelectionShape {
                    rows: values.len(),
                    cols: row.len(),
                    layers: values.len(),
                    clients: client_ids.len(),
                });
            }
            if let Some(k) = row.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(AggregationError::InvalidDivergence { layer: l, client: k });
            }
        }
        Ok(Self { values, client_ids })
    }

    /// Divergence of every local model against the broadcast model.
    pub fn from_models(
        locals: &[LayeredModel],
        client_ids: Vec<usize>,
        global_ref: &LayeredModel,
    ) -> Result<Self, AggregationError> {
        let layers = global_ref.layer_count();
        let mut values = vec![Vec::with_capacity(locals.len()); layers];
        for (k, local) in locals.iter().enumerate() {
            let div = layer_divergence(local, global_ref)
                .map_err(|_| AggregationError::ShapeMismatch { index: k })?;
            for (row, d) in values.iter_mut().zip(div) {
                row.push(d);
            }
        }
        Self::new(values, client_ids)
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn client_ids(&self) -> &[usize] {
        &self.client_ids
    }

    pub fn layer_count(&self) -> usize {
        self.values.len()
    }

    pub fn client_count(&self) -> usize {
        self.client_ids.len()
    }
}

/// Binary `[layer][client]` matrix; every row selects exactly `n` clients.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionMatrix {
    bits: Vec<Vec<bool>>,
    n: usize,
}

impl SelectionMatrix {
    pub fn new(bits: Vec<Vec<bool>>, n: usize) -> Result<Self, AggregationError> {
        let clients = bits.first().map_or(0, Vec::len);
        if n == 0 || n > clients {
            return Err(AggregationError::SelectionOutOfRange { n, clients });
        }
        for (l, row) in bits.iter().enumerate() {
            if row.len() != clients {
                return Err(AggregationError::SelectionShape {
                    rows: bits.len(),
                    cols: row.len(),
                    layers: bits.len(),
                    clients,
                });
            }
            let found = row.iter().filter(|&&b| b).count();
            if found != n {
                return Err(AggregationError::BadRowSum {
                    layer: l,
                    expected: n,
                    found,
                });
            }
        }
        Ok(Self { bits, n })
    }

    pub fn all_ones(layers: usize, clients: usize) -> Self {
        Self {
            bits: vec![vec![true; clients]; layers],
            n: clients,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn layer_count(&self) -> usize {
        self.bits.len()
    }

    pub fn client_count(&self) -> usize {
        self.bits.first().map_or(0, Vec::len)
    }

    pub fn rows(&self) -> &[Vec<bool>] {
        &self.bits
    }

    pub fn get(&self, layer: usize, client: usize) -> bool {
        self.bits[layer][client]
    }

    pub fn is_all_ones(&self) -> bool {
        self.bits.iter().flatten().all(|&b| b)
    }

    /// Number of selected clients in every layer.
    pub fn selected_per_layer(&self) -> Vec<usize> {
        self.bits
            .iter()
            .map(|row| row.iter().filter(|&&b| b).count())
            .collect()
    }

    /// Parameters uploaded under this selection, given per-layer sizes.
    pub fn uploaded_params(&self, layer_param_count: &[usize]) -> usize {
        self.selected_per_layer()
            .iter()
            .zip(layer_param_count)
            .map(|(s, c)| s * c)
            .sum()
    }
}

/// Keeps, per layer, the `n` clients with the largest divergence. Ties go to
/// the smaller client index.
pub fn select_top_n(div: &DivergenceMatrix, n: usize) -> Result<SelectionMatrix, AggregationError> {
    let clients = div.client_count();
    if n == 0 || n > clients {
        return Err(AggregationError::SelectionOutOfRange { n, clients });
    }
    let bits = div
        .values
        .iter()
        .map(|row| {
            let mut order: Vec<usize> = (0..clients).collect();
            order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            let mut bits = vec![false; clients];
            for &k in &order[..n] {
                bits[k] = true;
            }
            bits
        })
        .collect();
    SelectionMatrix::new(bits, n)
}

fn check_inputs(models: &[LayeredModel], sizes: &[usize]) -> Result<(), AggregationError> {
    let first = models.first().ok_or(AggregationError::NoModels)?;
    if models.len() != sizes.len() {
        return Err(AggregationError::SizeCountMismatch {
            models: models.len(),
            sizes: sizes.len(),
        });
    }
    if let Some(index) = models.iter().position(|m| !m.same_shape(first)) {
        return Err(AggregationError::ShapeMismatch { index });
    }
    if let Some(index) = sizes.iter().position(|&s| s == 0) {
        return Err(AggregationError::ZeroSize { index });
    }
    Ok(())
}

/// Weighted mean of one layer across the selected clients, computed as
/// `base + sum_k w_k (theta_k - base) / sum_k w_k` with `base` the first
/// selected client's layer.
fn weighted_layer_mean(
    models: &[LayeredModel],
    sizes: &[usize],
    layer: usize,
    selected: impl Fn(usize) -> bool,
) -> Result<ParameterLayer, AggregationError> {
    let chosen: Vec<usize> = (0..models.len()).filter(|&k| selected(k)).collect();
    let &first = chosen.first().ok_or(AggregationError::BadRowSum {
        layer,
        expected: 1,
        found: 0,
    })?;
    let base = &models[first].layers()[layer];
    let total: f64 = chosen.iter().map(|&k| sizes[k] as f64).sum();
    let mut acc = vec![0.0; base.param_count()];
    for &k in &chosen {
        let w = sizes[k] as f64;
        for ((a, x), b) in acc.iter_mut().zip(models[k].layers()[layer].params()).zip(base.params()) {
            *a += w * (x - b);
        }
    }
    let mut out = base.clone();
    for ((p, b), a) in out
        .params_mut()
        .zip(base.params())
        .zip(&acc)
    {
        *p = b + a / total;
    }
    Ok(out)
}

/// Layer `l` of the result is the dataset-size-weighted mean of layer `l`
/// over the clients selected for that layer.
pub fn aggregate_layerwise(
    models: &[LayeredModel],
    sizes: &[usize],
    sel: &SelectionMatrix,
) -> Result<LayeredModel, AggregationError> {
    check_inputs(models, sizes)?;
    let layers = models[0].layer_count();
    if sel.layer_count() != layers || sel.client_count() != models.len() {
        return Err(AggregationError::SelectionShape {
            rows: sel.layer_count(),
            cols: sel.client_count(),
            layers,
            clients: models.len(),
        });
    }
    let out = (0..layers)
        .map(|l| weighted_layer_mean(models, sizes, l, |k| sel.get(l, k)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(LayeredModel::new(out).expect("layers share the reference shape"))
}

/// FedAvg: dataset-size-weighted mean of every parameter over all clients.
pub fn aggregate_fedavg(
    models: &[LayeredModel],
    sizes: &[usize],
) -> Result<LayeredModel, AggregationError> {
    check_inputs(models, sizes)?;
    let out = (0..models[0].layer_count())
        .map(|l| weighted_layer_mean(models, sizes, l, |_| true))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(LayeredModel::new(out).expect("layers share the reference shape"))
}

fn random_subset<R: Rng + ?Sized>(clients: usize, n: usize, rng: &mut R) -> Vec<bool> {
    let mut bits = vec![false; clients];
    for k in rand::seq::index::sample(rng, clients, n) {
        bits[k] = true;
    }
    bits
}

/// Independent uniform `n`-subset of clients for every layer.
pub fn random_layer_selection<R: Rng + ?Sized>(
    layers: usize,
    clients: usize,
    n: usize,
    rng: &mut R,
) -> Result<SelectionMatrix, AggregationError> {
    if n == 0 || n > clients {
        return Err(AggregationError::SelectionOutOfRange { n, clients });
    }
    let bits = (0..layers).map(|_| random_subset(clients, n, rng)).collect();
    SelectionMatrix::new(bits, n)
}

/// One uniform `keep`-subset of whole clients, applied to every layer.
pub fn client_dropout_selection<R: Rng + ?Sized>(
    layers: usize,
    clients: usize,
    keep: usize,
    rng: &mut R,
) -> Result<SelectionMatrix, AggregationError> {
    if keep == 0 || keep > clients {
        return Err(AggregationError::SelectionOutOfRange { n: keep, clients });
    }
    let row = random_subset(clients, keep, rng);
    SelectionMatrix::new(vec![row; layers], keep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Matrix;
    use crate::rng::seeded;

    fn scalar_model(v: f64) -> LayeredModel {
        LayeredModel::new(vec![ParameterLayer::new(
            Matrix::from_vec(1, 1, vec![v]).unwrap(),
            vec![v],
        )
        .unwrap()])
        .unwrap()
    }

    fn row_matrix(row: Vec<f64>) -> DivergenceMatrix {
        let ids = (0..row.len()).collect();
        DivergenceMatrix::new(vec![row], ids).unwrap()
    }

    #[test]
    fn divergence_of_identical_models_is_zero() {
        let m = LayeredModel::init(&[3, 4, 2], &mut seeded(1)).unwrap();
        assert_eq!(layer_divergence(&m, &m).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn divergence_hand_value() {
        let local = LayeredModel::new(vec![ParameterLayer::new(
            Matrix::from_vec(1, 1, vec![1.0]).unwrap(),
            vec![2.0],
        )
        .unwrap()])
        .unwrap();
        let global = LayeredModel::zeros(&[1, 1]).unwrap();
        assert_eq!(layer_divergence(&local, &global).unwrap(), vec![5f64.sqrt()]);
    }

    #[test]
    fn divergence_scales_with_difference() {
        let mut rng = seeded(2);
        let g = LayeredModel::init(&[3, 3, 2], &mut rng).unwrap();
        let mut a = g.clone();
        for p in a.layers_mut()[1].params_mut() {
            *p += 0.25;
        }
        let mut b = g.clone();
        for p in b.layers_mut()[1].params_mut() {
            *p += 0.75;
        }
        let da = layer_divergence(&a, &g).unwrap();
        let db = layer_divergence(&b, &g).unwrap();
        assert_eq!(da[0], 0.0);
        assert_eq!(db[0], 0.0);
        assert!((db[1] - 3.0 * da[1]).abs() < 1e-12);
    }

    #[test]
    fn top_n_examples() {
        let sel = select_top_n(&row_matrix(vec![0.5, 0.9, 0.1, 0.9]), 2).unwrap();
        assert_eq!(sel.rows()[0], vec![false, true, false, true]);
        let sel = select_top_n(&row_matrix(vec![0.3; 4]), 2).unwrap();
        assert_eq!(sel.rows()[0], vec![true, true, false, false]);
        let sel = select_top_n(&row_matrix(vec![0.3, 0.1, 0.2]), 3).unwrap();
        assert!(sel.is_all_ones());
    }

    #[test]
    fn top_n_range_checked() {
        let d = row_matrix(vec![0.1, 0.2]);
        assert!(select_top_n(&d, 0).is_err());
        assert!(select_top_n(&d, 3).is_err());
    }

    #[test]
    fn selection_matrix_validates_rows() {
        assert!(SelectionMatrix::new(vec![vec![true, false], vec![true, true]], 1).is_err());
        assert!(SelectionMatrix::new(vec![vec![true, false], vec![false, true]], 1).is_ok());
    }

    #[test]
    fn layerwise_hand_value() {
        let models = vec![scalar_model(0.0), scalar_model(4.0)];
        let out = aggregate_layerwise(&models, &[1, 3], &SelectionMatrix::all_ones(1, 2)).unwrap();
        assert_eq!(out.flatten(), vec![3.0, 3.0]);
    }

    #[test]
    fn layerwise_uses_only_selected_clients() {
        let models = vec![scalar_model(1.0), scalar_model(5.0), scalar_model(100.0)];
        let sel = SelectionMatrix::new(vec![vec![true, true, false]], 2).unwrap();
        let out = aggregate_layerwise(&models, &[1, 1, 1], &sel).unwrap();
        assert_eq!(out.flatten(), vec![3.0, 3.0]);
    }

    #[test]
    fn identical_models_aggregate_to_themselves() {
        let m = LayeredModel::init(&[4, 3, 2], &mut seeded(5)).unwrap();
        let models = vec![m.clone(), m.clone(), m.clone()];
        let sel = SelectionMatrix::new(vec![vec![false, true, false], vec![true, false, false]], 1)
            .unwrap();
        assert_eq!(aggregate_layerwise(&models, &[3, 7, 2], &sel).unwrap(), m);
        assert_eq!(aggregate_fedavg(&models, &[3, 7, 2]).unwrap(), m);
    }

    #[test]
    fn fedavg_hand_values() {
        let out = aggregate_fedavg(&[scalar_model(1.0), scalar_model(3.0)], &[5, 5]).unwrap();
        assert_eq!(out.flatten(), vec![2.0, 2.0]);
        let out = aggregate_fedavg(&[scalar_model(0.0), scalar_model(10.0)], &[1, 9]).unwrap();
        assert_eq!(out.flatten(), vec![9.0, 9.0]);
    }

    #[test]
    fn aggregation_errors() {
        let a = scalar_model(1.0);
        let b = LayeredModel::zeros(&[2, 1]).unwrap();
        assert_eq!(
            aggregate_fedavg(&[a.clone(), b], &[1, 1]).unwrap_err(),
            AggregationError::ShapeMismatch { index: 1 }
        );
        assert_eq!(
            aggregate_fedavg(std::slice::from_ref(&a), &[0]).unwrap_err(),
            AggregationError::ZeroSize { index: 0 }
        );
        assert_eq!(aggregate_fedavg(&[], &[]).unwrap_err(), AggregationError::NoModels);
        let sel = SelectionMatrix::all_ones(2, 1);
        assert!(aggregate_layerwise(&[a], &[1], &sel).is_err());
    }

    #[test]
    fn random_selection_full_and_row_sums() {
        let mut rng = seeded(3);
        assert!(random_layer_selection(3, 4, 4, &mut rng).unwrap().is_all_ones());
        let sel = random_layer_selection(6, 9, 3, &mut rng).unwrap();
        assert!(sel.selected_per_layer().iter().all(|&s| s == 3));
        assert!(random_layer_selection(2, 3, 0, &mut rng).is_err());
        assert!(random_layer_selection(2, 3, 4, &mut rng).is_err());
    }

    #[test]
    fn random_selection_frequency() {
        let mut rng = seeded(11);
        let mut counts = [0usize; 5];
        let draws = 10_000;
        for _ in 0..draws {
            let sel = random_layer_selection(1, 5, 2, &mut rng).unwrap();
            for (k, c) in counts.iter_mut().enumerate() {
                *c += usize::from(sel.get(0, k));
            }
        }
        for c in counts {
            let f = c as f64 / draws as f64;
            assert!((f - 0.4).abs() <= 0.02, "frequency {f}");
        }
    }

    #[test]
    fn client_dropout_rows_identical() {
        let mut rng = seeded(4);
        assert!(client_dropout_selection(3, 5, 5, &mut rng).unwrap().is_all_ones());
        let sel = client_dropout_selection(4, 6, 2, &mut rng).unwrap();
        assert!(sel.rows().windows(2).all(|w| w[0] == w[1]));
        let one = client_dropout_selection(3, 6, 1, &mut rng).unwrap();
        let ones: Vec<usize> = (0..6).filter(|&k| one.get(0, k)).collect();
        assert_eq!(ones.len(), 1);
        assert!(one.rows().iter().all(|r| r[ones[0]]));
        assert!(client_dropout_selection(3, 6, 7, &mut rng).is_err());
    }
}
