use super::{DiffError, Graph, NodeId, ParameterStore};

/// Per-parameter outcome of [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `(name, max relative error)` in store order.
    pub per_param: Vec<(String, f64)>,
    pub max_rel_error: f64,
}

/// Compare reverse-mode gradients of a scalar graph against central
/// differences with step `step`, perturbing every parameter element.
///
/// The error for one element is `|analytic - fd| / max(1e-8, |fd|)`.
pub fn grad_check<F>(build: F, store: &ParameterStore, step: f64) -> Result<GradCheckReport, DiffError>
where
    F: Fn(&mut Graph, &ParameterStore) -> Result<NodeId, DiffError>,
{
    let eval = |s: &ParameterStore| -> Result<f64, DiffError> {
        let mut g = Graph::new();
        let loss = build(&mut g, s)?;
        g.value(loss)
            .item()
            .ok_or_else(|| DiffError::NonScalarLoss(g.value(loss).shape().to_vec()))
    };

    let mut analytic = store.clone();
    analytic.zero_grad();
    let mut g = Graph::new();
    let loss = build(&mut g, &analytic)?;
    g.backward(loss, &mut analytic)?;

    let mut probe = store.clone();
    let mut per_param = Vec::with_capacity(store.len());
    let mut max_rel_error = 0.0f64;
    let names: Vec<String> = store.names().map(str::to_owned).collect();
    for name in names {
        let n = store.value(&name).map_or(0, |v| v.len());
        let mut worst = 0.0f64;
        for i in 0..n {
            let orig = store.value(&name).expect("name from store").data()[i];
            probe.value_mut(&name).expect("name from store").data_mut()[i] = orig + step;
            let plus = eval(&probe)?;
            probe.value_mut(&name).expect("name from store").data_mut()[i] = orig - step;
            let minus = eval(&probe)?;
            probe.value_mut(&name).expect("name from store").data_mut()[i] = orig;
            let fd = (plus - minus) / (2.0 * step);
            let an = analytic.grad(&name).expect("name from store").data()[i];
            let rel = (an - fd).abs() / fd.abs().max(1e-8);
            worst = worst.max(rel);
        }
        max_rel_error = max_rel_error.max(worst);
        per_param.push((name, worst));
    }
    Ok(GradCheckReport {
        per_param,
        max_rel_error,
    })
}
