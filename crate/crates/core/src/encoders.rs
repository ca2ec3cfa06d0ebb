//! GNN encoders, MLP blocks and mean readout.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graphdata::Graph;
use crate::params::{glorot, Bound, ModelError, ParamTag, ParameterSet};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Gin,
    #[serde(rename = "graphsage")]
    GraphSage,
}

impl std::str::FromStr for EncoderKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "gin" => Ok(Self::Gin),
            "graphsage" | "sage" => Ok(Self::GraphSage),
            other => Err(format!(
                "unknown encoder '{other}' (expected gin or graphsage)"
            )),
        }
    }
}

impl std::fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Gin => "gin",
            Self::GraphSage => "graphsage",
        })
    }
}

/// A graph recorded on a tape: node features plus the propagation matrix the
/// encoder variant needs (plain adjacency for GIN, row-normalised for SAGE).
pub struct GraphInput<'t> {
    pub num_nodes: usize,
    pub features: Var<'t>,
    pub propagation: Var<'t>,
}

impl<'t> GraphInput<'t> {
    pub fn new(tape: &'t Tape, graph: &Graph, kind: EncoderKind) -> Self {
        let propagation = match kind {
            EncoderKind::Gin => graph.adjacency(),
            EncoderKind::GraphSage => graph.mean_adjacency(),
        };
        Self {
            num_nodes: graph.num_nodes(),
            features: tape.constant(graph.features().clone()),
            propagation: tape.constant(propagation),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinalActivation {
    None,
    Sigmoid,
}

/// Affine layers with ReLU in between.
#[derive(Debug, Clone)]
pub struct MlpBlock {
    prefix: String,
    sizes: Vec<usize>,
    output: FinalActivation,
}

impl MlpBlock {
    pub fn new(prefix: &str, sizes: Vec<usize>, output: FinalActivation) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        Self {
            prefix: prefix.to_string(),
            sizes,
            output,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    fn names(&self, layer: usize) -> (String, String) {
        (
            format!("{}.l{layer}.w", self.prefix),
            format!("{}.l{layer}.b", self.prefix),
        )
    }

    pub fn init(
        &self,
        params: &mut ParameterSet,
        tag: ParamTag,
        rng: &mut impl Rng,
    ) -> Result<(), ModelError> {
        for (i, pair) in self.sizes.windows(2).enumerate() {
            let (w, b) = self.names(i);
            params.insert(&w, tag, glorot(pair[0], pair[1], rng))?;
            params.insert(&b, tag, Tensor::zeros(&[1, pair[1]]))?;
        }
        Ok(())
    }

    /// Applies the block to every row of `x` (`rows × input_dim`).
    pub fn forward<'t>(&self, bound: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>, ModelError> {
        let cols = *x.shape().last().unwrap_or(&0);
        if cols != self.input_dim() {
            return Err(ModelError::Dimension {
                what: "mlp input",
                expected: self.input_dim(),
                got: cols,
            });
        }
        let layers = self.sizes.len() - 1;
        let mut h = x;
        for i in 0..layers {
            let (w, b) = self.names(i);
            h = h.matmul(bound.get(&w)?)?.add(bound.get(&b)?)?;
            if i + 1 < layers {
                h = h.relu()?;
            }
        }
        Ok(match self.output {
            FinalActivation::None => h,
            FinalActivation::Sigmoid => h.sigmoid()?,
        })
    }
}

/// Message-passing encoder producing one `hidden`-dimensional row per node.
///
/// GIN layers compute `MLP(h_v + Σ_{u∈N(v)} h_u)` (ε fixed at 0) with a
/// two-layer MLP, and a ReLU between layers. GraphSAGE layers compute
/// `ReLU([h_v ‖ mean_{u∈N(v)} h_u] W + b)`.
#[derive(Debug, Clone)]
pub struct GnnEncoder {
    prefix: String,
    kind: EncoderKind,
    in_dim: usize,
    hidden: usize,
    layers: usize,
}

impl GnnEncoder {
    pub fn new(
        prefix: &str,
        kind: EncoderKind,
        in_dim: usize,
        hidden: usize,
        layers: usize,
    ) -> Self {
        Self {
            prefix: prefix.to_string(),
            kind,
            in_dim,
            hidden,
            layers,
        }
    }

    pub fn kind(&self) -> EncoderKind {
        self.kind
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    fn layer_in(&self, layer: usize) -> usize {
        if layer == 0 {
            self.in_dim
        } else {
            self.hidden
        }
    }

    fn layer_mlp(&self, layer: usize) -> MlpBlock {
        let input = match self.kind {
            EncoderKind::Gin => self.layer_in(layer),
            EncoderKind::GraphSage => 2 * self.layer_in(layer),
        };
        let sizes = match self.kind {
            EncoderKind::Gin => vec![input, self.hidden, self.hidden],
            EncoderKind::GraphSage => vec![input, self.hidden],
        };
        MlpBlock::new(
            &format!("{}.l{layer}", self.prefix),
            sizes,
            FinalActivation::None,
        )
    }

    pub fn init(
        &self,
        params: &mut ParameterSet,
        tag: ParamTag,
        rng: &mut impl Rng,
    ) -> Result<(), ModelError> {
        for l in 0..self.layers {
            self.layer_mlp(l).init(params, tag, rng)?;
        }
        Ok(())
    }

    pub fn encode<'t>(
        &self,
        bound: &Bound<'t>,
        input: &GraphInput<'t>,
    ) -> Result<Var<'t>, ModelError> {
        let got = input.features.shape()[1];
        if got != self.in_dim {
            return Err(ModelError::Dimension {
                what: "node features",
                expected: self.in_dim,
                got,
            });
        }
        let mut h = input.features;
        for l in 0..self.layers {
            let neigh = input.propagation.matmul(h)?;
            h = match self.kind {
                EncoderKind::Gin => {
                    let out = self.layer_mlp(l).forward(bound, h.add(neigh)?)?;
                    if l + 1 < self.layers {
                        out.relu()?
                    } else {
                        out
                    }
                }
                EncoderKind::GraphSage => self
                    .layer_mlp(l)
                    .forward(bound, Var::concat(&[h, neigh], 1)?)?
                    .relu()?,
            };
        }
        Ok(h)
    }
}

/// Mean of the rows of `h` (`n × d`), returned as a `1 × d` row. With
/// `weights` (length `n`, entries in `[0, 1]`) row `v` is scaled by
/// `weights[v]` before pooling; the divisor stays `n`.
pub fn readout<'t>(h: Var<'t>, weights: Option<Var<'t>>) -> Result<Var<'t>, ModelError> {
    let shape = h.shape();
    if shape.len() != 2 {
        return Err(ModelError::Input(format!(
            "readout expects a matrix, got {shape:?}"
        )));
    }
    let (n, d) = (shape[0], shape[1]);
    if n == 0 {
        return Err(crate::tensor::TensorError::EmptyReduction { op: "readout" }.into());
    }
    match weights {
        None => Ok(h.mean(Some(0))?.reshape(&[1, d])?),
        Some(w) => {
            let len = w.value().len();
            if len != n {
                return Err(ModelError::Dimension {
                    what: "readout weights",
                    expected: n,
                    got: len,
                });
            }
            if w.value().data().iter().any(|&x| !(0.0..=1.0).contains(&x)) {
                return Err(ModelError::Input(
                    "readout weights must lie in [0, 1]".into(),
                ));
            }
            Ok(w.reshape(&[1, n])?.matmul(h)?.scale(1.0 / n as f64)?)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_graph(n: usize, d: usize, p: f64, seed: u64) -> Graph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut edges = vec![];
        for u in 0..n {
            for v in u + 1..n {
                if rng.random::<f64>() < p {
                    edges.push((u, v));
                }
            }
        }
        let feats = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        Graph::new(0, n, &edges, Tensor::matrix(n, d, feats).unwrap(), 0, None).unwrap()
    }

    fn setup(kind: EncoderKind, layers: usize) -> (GnnEncoder, ParameterSet) {
        let enc = GnnEncoder::new("enc", kind, 4, 8, layers);
        let mut params = ParameterSet::new();
        enc.init(
            &mut params,
            ParamTag::Slow,
            &mut ChaCha8Rng::seed_from_u64(7),
        )
        .unwrap();
        (enc, params)
    }

    fn run(enc: &GnnEncoder, params: &ParameterSet, g: &Graph) -> Tensor {
        let tape = Tape::new();
        let bound = params.bind(&tape, &[], None);
        let input = GraphInput::new(&tape, g, enc.kind());
        enc.encode(&bound, &input).unwrap().to_tensor()
    }

    #[test]
    fn isolated_node_gin_is_a_plain_mlp() {
        let (enc, params) = setup(EncoderKind::Gin, 2);
        let g = random_graph(1, 4, 0.0, 1);
        let out = run(&enc, &params, &g);

        let tape = Tape::new();
        let bound = params.bind(&tape, &[], None);
        let x = tape.constant(g.features().clone());
        let h = enc.layer_mlp(0).forward(&bound, x).unwrap().relu().unwrap();
        let h = enc.layer_mlp(1).forward(&bound, h).unwrap();
        assert_eq!(out, h.to_tensor());
    }

    #[test]
    fn edgeless_gin_equals_per_node_mlp() {
        let (enc, params) = setup(EncoderKind::Gin, 3);
        let g = random_graph(5, 4, 0.0, 2);
        let all = run(&enc, &params, &g);
        for v in 0..5 {
            let single = Graph::new(
                0,
                1,
                &[],
                Tensor::matrix(1, 4, g.features().row(v).to_vec()).unwrap(),
                0,
                None,
            )
            .unwrap();
            assert_eq!(run(&enc, &params, &single).row(0), all.row(v));
        }
    }

    #[test]
    fn encoders_are_permutation_equivariant() {
        for kind in [EncoderKind::Gin, EncoderKind::GraphSage] {
            let (enc, params) = setup(kind, 2);
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            for seed in 0..5 {
                let g = random_graph(6, 4, 0.4, seed);
                let mut perm: Vec<usize> = (0..6).collect();
                perm.shuffle(&mut rng);
                let a = run(&enc, &params, &g);
                let b = run(&enc, &params, &g.permuted(&perm));
                for v in 0..6 {
                    for (x, y) in a.row(v).iter().zip(b.row(perm[v])) {
                        assert!((x - y).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn isomorphic_graphs_give_equal_row_multisets() {
        // A 5-node graph and a relabelled copy built from scratch; pairing
        // rows by brute force over all 120 bijections.
        let (enc, params) = setup(EncoderKind::Gin, 2);
        let feats = Tensor::ones(&[5, 4]);
        let g1 = Graph::new(
            0,
            5,
            &[(0, 1), (1, 2), (2, 3), (3, 0), (3, 4)],
            feats.clone(),
            0,
            None,
        )
        .unwrap();
        let g2 = Graph::new(
            0,
            5,
            &[(4, 2), (2, 0), (0, 1), (1, 4), (1, 3)],
            feats,
            0,
            None,
        )
        .unwrap();
        let (a, b) = (run(&enc, &params, &g1), run(&enc, &params, &g2));

        fn perms(items: Vec<usize>) -> Vec<Vec<usize>> {
            if items.len() <= 1 {
                return vec![items];
            }
            let mut out = vec![];
            for i in 0..items.len() {
                let mut rest = items.clone();
                let x = rest.remove(i);
                for mut p in perms(rest) {
                    p.insert(0, x);
                    out.push(p);
                }
            }
            out
        }
        let matched = perms((0..5).collect()).into_iter().any(|p| {
            (0..5).all(|v| {
                a.row(v)
                    .iter()
                    .zip(b.row(p[v]))
                    .all(|(x, y)| (x - y).abs() < 1e-12)
            })
        });
        assert!(matched);
    }

    #[test]
    fn encode_rejects_feature_mismatch() {
        let (enc, params) = setup(EncoderKind::Gin, 2);
        let g = random_graph(3, 5, 0.5, 4);
        let tape = Tape::new();
        let bound = params.bind(&tape, &[], None);
        let input = GraphInput::new(&tape, &g, EncoderKind::Gin);
        assert!(matches!(
            enc.encode(&bound, &input),
            Err(ModelError::Dimension {
                expected: 4,
                got: 5,
                ..
            })
        ));
    }

    #[test]
    fn outputs_are_finite_for_bounded_inputs() {
        for kind in [EncoderKind::Gin, EncoderKind::GraphSage] {
            let (enc, params) = setup(kind, 3);
            let mut g = random_graph(20, 4, 0.3, 5);
            g = Graph::new(0, 20, &g.edges(), g.features().map(|x| x * 10.0), 0, None).unwrap();
            assert!(run(&enc, &params, &g).all_finite());
        }
    }

    #[test]
    fn readout_cases() {
        let tape = Tape::new();
        let h = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap());
        assert_eq!(readout(h, None).unwrap().to_tensor().data(), &[1.0, 2.0]);
        let zero = tape.constant(Tensor::zeros(&[2]));
        assert_eq!(
            readout(h, Some(zero)).unwrap().to_tensor().data(),
            &[0.0, 0.0]
        );

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let hm =
            Tensor::matrix(4, 3, (0..12).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let w: Vec<f64> = (0..4).map(|_| rng.random::<f64>()).collect();
        let scaled =
            Tensor::matrix(4, 3, (0..12).map(|i| hm.data()[i] * w[i / 3]).collect()).unwrap();
        let weighted = readout(tape.constant(hm), Some(tape.constant(Tensor::vector(w))))
            .unwrap()
            .to_tensor();
        let plain = readout(tape.constant(scaled), None).unwrap().to_tensor();
        for (a, b) in weighted.data().iter().zip(plain.data()) {
            assert!((a - b).abs() < 1e-12);
        }

        let empty = tape.constant(Tensor::zeros(&[0, 3]));
        assert!(readout(empty, None).is_err());
        let bad = tape.constant(Tensor::vector(vec![0.5, 2.0]));
        assert!(matches!(readout(h, Some(bad)), Err(ModelError::Input(_))));
    }

    #[test]
    fn mlp_cases() {
        let block = MlpBlock::new("m", vec![3, 1], FinalActivation::None);
        let mut params = ParameterSet::new();
        block
            .init(
                &mut params,
                ParamTag::Fast,
                &mut ChaCha8Rng::seed_from_u64(8),
            )
            .unwrap();
        let x = Tensor::from_rows(&[vec![1.0, -2.0, 0.5]]).unwrap();
        let tape = Tape::new();
        let bound = params.bind(&tape, &[], None);
        let out = block
            .forward(&bound, tape.constant(x.clone()))
            .unwrap()
            .to_tensor();
        let expect = x
            .matmul(&params.get("m.l0.w").unwrap().value)
            .unwrap()
            .data()[0]
            + params.get("m.l0.b").unwrap().value.data()[0];
        assert_eq!(out.data()[0], expect);

        let mut zeroed = params.clone();
        for name in zeroed.names(ParamTag::Fast) {
            zeroed.value_mut(&name).unwrap().data_mut().fill(0.0);
        }
        let bound = zeroed.bind(&tape, &[], None);
        let out = block.forward(&bound, tape.constant(x)).unwrap().to_tensor();
        assert_eq!(out.data(), &[0.0]);

        let wrong = tape.constant(Tensor::zeros(&[1, 2]));
        assert!(matches!(
            block.forward(&bound, wrong),
            Err(ModelError::Dimension { .. })
        ));
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        let block = MlpBlock::new("m", vec![3, 5, 2], FinalActivation::None);
        let mut params = ParameterSet::new();
        block
            .init(
                &mut params,
                ParamTag::Fast,
                &mut ChaCha8Rng::seed_from_u64(9),
            )
            .unwrap();
        let x = Tensor::from_rows(&[vec![0.3, -1.2, 0.8], vec![1.5, 0.1, -0.4]]).unwrap();
        let loss_at = |p: &ParameterSet| {
            let tape = Tape::new();
            let b = p.bind(&tape, &[], None);
            let y = block.forward(&b, tape.constant(x.clone())).unwrap();
            y.mul(y).unwrap().sum(None).unwrap().item()
        };
        let tape = Tape::new();
        let b = params.bind(&tape, &[ParamTag::Fast], None);
        let y = block.forward(&b, tape.constant(x.clone())).unwrap();
        y.mul(y).unwrap().sum(None).unwrap().backward().unwrap();
        let grads = b.grads();
        for (name, g) in &grads {
            for i in 0..g.len() {
                let mut plus = params.clone();
                plus.value_mut(name).unwrap().data_mut()[i] += 1e-5;
                let mut minus = params.clone();
                minus.value_mut(name).unwrap().data_mut()[i] -= 1e-5;
                let num = (loss_at(&plus) - loss_at(&minus)) / 2e-5;
                let a = g.data()[i];
                assert!(
                    (a - num).abs() / a.abs().max(num.abs()).max(1e-6) < 1e-4,
                    "{name}[{i}]"
                );
            }
        }
    }
}
