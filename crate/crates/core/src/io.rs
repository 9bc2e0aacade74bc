//! Self-contained JSON snapshot of a simplicial map.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::complex::{Complex, ComplexSpec};
use crate::energy::SimplicialMap;
use crate::error::{Error, MeshError};
use crate::hyperbolic::UHPoint;
use crate::mesh::{ComplexMesh, MeshDump};
use crate::metric::{IdealMetric, MetricCharts, MetricFile, COMPLETENESS_TOL};

/// Everything needed to rebuild a map: both metrics, the domain mesh and the
/// image of every node in the τ face chart of its face.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapFile {
    pub complex: ComplexSpec,
    pub sigma: MetricFile,
    pub tau: MetricFile,
    pub mesh: MeshDump,
    pub targets: Vec<Vec<[f64; 2]>>,
    pub edge_log_y: Vec<f64>,
}

impl MapFile {
    pub fn from_map(u: &SimplicialMap) -> Self {
        Self {
            complex: u.complex().to_spec(),
            sigma: u.mesh.charts.metric.to_file(),
            tau: u.tau.metric.to_file(),
            mesh: u.mesh.dump(),
            targets: u.targets.iter().map(|f| f.iter().map(|q| [q.x, q.y]).collect()).collect(),
            edge_log_y: u.edge_log_y.clone(),
        }
    }

    pub fn to_map(&self) -> Result<SimplicialMap, Error> {
        let complex = Arc::new(Complex::build(&self.complex)?);
        let charts = |file: &MetricFile| -> Result<Arc<MetricCharts>, Error> {
            let metric = IdealMetric::from_file(complex.clone(), file)?;
            Ok(Arc::new(MetricCharts::new(&metric, COMPLETENESS_TOL)?))
        };
        let (sigma, tau) = (charts(&self.sigma)?, charts(&self.tau)?);
        let mesh = Arc::new(ComplexMesh::from_dump(sigma, self.mesh.clone())?);
        let bad = |reason: &str| Error::Mesh(MeshError::InvalidConfig(format!("map file: {reason}")));
        if self.targets.len() != mesh.faces.len()
            || self.targets.iter().zip(&mesh.faces).any(|(t, f)| t.len() != f.nodes.len())
        {
            return Err(bad("targets do not match the mesh"));
        }
        if self.edge_log_y.len() != mesh.edge_classes.len() {
            return Err(bad("edge parameters do not match the mesh"));
        }
        let targets = self
            .targets
            .iter()
            .map(|f| f.iter().map(|&[x, y]| UHPoint::new(x, y)).collect())
            .collect();
        let map = SimplicialMap::new(mesh, tau, targets, self.edge_log_y.clone());
        map.validate().map_err(Error::from)?;
        Ok(map)
    }
}
