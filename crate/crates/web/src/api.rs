use handgcn::autodiff::Graph;
use handgcn::graph::{AdjacencyStack, Edge, HandGraphTopology, SUBSET_COUNT};
use handgcn::keypoints::JOINT_COUNT;
use handgcn::nn::to_bone_stream;
use handgcn::pipeline::compute_metrics;
use handgcn::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum DemoError {
    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Core(#[from] handgcn::Error),
    #[error("{0}")]
    Input(String),
}

type Result<T> = std::result::Result<T, DemoError>;

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct GraphView {
    pub vertices: usize,
    pub natural: Vec<Edge>,
    pub type1: Vec<Edge>,
    pub type2: Vec<Edge>,
    /// `adjacency[k][i][j]`.
    pub adjacency: Vec<Vec<Vec<f64>>>,
}

pub fn hand_graph(include_supplementary: bool) -> Result<String> {
    let topo = HandGraphTopology::build();
    let stack = AdjacencyStack::build(&topo, include_supplementary);
    let v = topo.vertex_count;
    let adjacency = (0..SUBSET_COUNT)
        .map(|k| {
            let s = stack.slice(k);
            s.data().chunks(v).map(<[f64]>::to_vec).collect()
        })
        .collect();
    let (type1, type2) = if include_supplementary {
        (topo.supp_neighbor_edges.clone(), topo.supp_bend_edges.clone())
    } else {
        (Vec::new(), Vec::new())
    };
    Ok(serde_json::to_string(&GraphView {
        vertices: v,
        natural: topo.natural_edges.clone(),
        type1,
        type2,
        adjacency,
    })?)
}

pub fn bone_stream(pose_json: &str) -> Result<String> {
    let pose: Vec<[f64; 3]> = serde_json::from_str(pose_json)?;
    if pose.len() != JOINT_COUNT {
        return Err(DemoError::Input(format!("expected {JOINT_COUNT} joints, got {}", pose.len())));
    }
    let x = Tensor::from_fn(&[1, 3, 1, JOINT_COUNT], |i| pose[i % JOINT_COUNT][i / JOINT_COUNT]);
    let mut g = Graph::new();
    let xv = g.input(x);
    let bones = to_bone_stream(&mut g, xv, &HandGraphTopology::build().bone_pairs())?;
    let b = g.value(bones);
    let out: Vec<[f64; 3]> = (0..JOINT_COUNT)
        .map(|v| [b.get(&[0, 0, 0, v]), b.get(&[0, 1, 0, v]), b.get(&[0, 2, 0, v])])
        .collect();
    Ok(serde_json::to_string(&out)?)
}

#[derive(Debug, Deserialize)]
struct ReportInput {
    classes: Vec<String>,
    confusion: Vec<Vec<u64>>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ClassRow {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ReportView {
    pub rows: Vec<ClassRow>,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

pub fn classification_report(input_json: &str) -> Result<String> {
    let input: ReportInput = serde_json::from_str(input_json)?;
    let report = compute_metrics(&input.confusion, &input.classes)?;
    let rows = report
        .classes
        .iter()
        .zip(&report.per_class)
        .map(|(c, m)| ClassRow {
            class: c.clone(),
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
            support: m.support,
        })
        .collect();
    Ok(serde_json::to_string(&ReportView {
        rows,
        accuracy: report.accuracy,
        macro_precision: report.macro_precision,
        macro_recall: report.macro_recall,
        macro_f1: report.macro_f1,
    })?)
}
