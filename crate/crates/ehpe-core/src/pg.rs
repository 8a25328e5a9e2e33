//! Second stage: prior-guided estimation of all 21 joints.
//!
//! Two branches read the first stage's outputs.  The structural branch builds
//! a joint graph — first-stage coordinates for the supervised joints, learned
//! coordinate embeddings for the rest, each node concatenating its (x, y, z)
//! with a bilinearly sampled feature column — and runs multi-head graph
//! attention over the kinematic adjacency (one-hop in the first layer,
//! two-hop after) with a skip projection from the input features at every
//! layer.  The enhancement branch flattens the feature map into tokens,
//! applies scaled-dot-product self-attention, and lets 21 learned joint
//! queries cross-attend to the enhanced tokens.  A learnable fusion combines
//! the branch outputs: a 21x21 matrix mixes structural-branch joints, a
//! 21-vector scales enhancement-branch rows.
//!
//! Coordinates follow the first stage's convention: (x, y) in refined-heatmap
//! cells, z in depth units.

use std::sync::Arc;

use rand_chacha::ChaCha20Rng;

use crate::autodiff::{GraphEdges, Tape, Var};
use crate::config::{EdgeWeightMode, EmbedInit, ModelConfig};
use crate::error::{Error, Result};
use crate::params::{self, ParamId, ParamKind, ParamSet};
use crate::skeleton::{self, NUM_JOINTS};
use crate::tensor::Tensor;

/// Weight of the pose term in the stage loss.
pub const LAMBDA_POSE: f64 = 2e-2;
/// Weight of the edge-regularity term.
pub const LAMBDA_EDGE: f64 = 2e-1;

/// Bound parameter triple of one attention head.
#[derive(Clone, Copy)]
pub struct GatHeadVars {
    pub w: Var,
    pub a_self: Var,
    pub a_neigh: Var,
}

/// One dynamic graph-attention layer: per head, project node features,
/// score edges as leaky-relu(a_self . Wh_i + a_neigh . Wh_j), normalize over
/// each neighborhood, aggregate, then concatenate heads.
/// Returns the `[N, K * F']` output and the per-head `[N, N]` weights.
pub fn gat_layer(
    tape: &mut Tape,
    h: Var,
    heads: &[GatHeadVars],
    edges: &Arc<GraphEdges>,
) -> Result<(Var, Vec<Var>)> {
    let mut outs = Vec::with_capacity(heads.len());
    let mut alphas = Vec::with_capacity(heads.len());
    for head in heads {
        let wh = tape.matmul(h, head.w)?;
        let s_self = tape.matmul(wh, head.a_self)?;
        let s_neigh = tape.matmul(wh, head.a_neigh)?;
        let alpha = tape.gat_alpha(s_self, s_neigh, edges)?;
        let out = tape.gat_aggregate(alpha, wh, edges)?;
        alphas.push(alpha);
        outs.push(out);
    }
    Ok((tape.concat(&outs, 1)?, alphas))
}

/// Constant uniform attention over each neighborhood (the fixed-edge-weight
/// baseline): alpha[i, j] = 1 / |N(i)| for j in N(i).
pub fn uniform_alpha(edges: &GraphEdges) -> Tensor {
    let n = edges.n();
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        let ns = edges.neighbors(i);
        for &j in ns {
            data[i * n + j] = 1.0 / ns.len() as f64;
        }
    }
    Tensor::new(vec![n, n], data).expect("square alpha")
}

/// The fixed-weight counterpart of [`gat_layer`]: same projections and
/// aggregation, but edge weights are the constant uniform distribution.
pub fn gat_layer_fixed(
    tape: &mut Tape,
    h: Var,
    ws: &[Var],
    edges: &Arc<GraphEdges>,
) -> Result<(Var, Vec<Var>)> {
    let alpha = tape.constant(&uniform_alpha(edges));
    let mut outs = Vec::with_capacity(ws.len());
    let mut alphas = Vec::with_capacity(ws.len());
    for &w in ws {
        let wh = tape.matmul(h, w)?;
        let out = tape.gat_aggregate(alpha, wh, edges)?;
        alphas.push(alpha);
        outs.push(out);
    }
    Ok((tape.concat(&outs, 1)?, alphas))
}

/// Scaled-dot-product attention: softmax(q kᵀ / sqrt(d_k)) v.
/// Returns (output, attention matrix); attention rows sum to 1.
pub fn scaled_dot_attention(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let dk = tape.shape(q)[1];
    if tape.shape(k)[1] != dk {
        return Err(Error::shape("attention: q and k widths differ".to_string()));
    }
    if tape.shape(v)[0] != tape.shape(k)[0] {
        return Err(Error::shape("attention: k and v token counts differ".to_string()));
    }
    let kt = tape.transpose2d(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, 1.0 / (dk as f64).sqrt());
    let attn = tape.softmax(scaled, 1)?;
    let out = tape.matmul(attn, v)?;
    Ok((out, attn))
}

/// Learnable dual-branch fusion: omega_g @ structural + omega_e ⊙ enhanced,
/// with omega_g `[N, N]`, omega_e `[N, 1]` broadcasting over coordinates.
pub fn fuse(tape: &mut Tape, spi_out: Var, fem_out: Var, omega_g: Var, omega_e: Var) -> Result<Var> {
    let mixed = tape.matmul(omega_g, spi_out)?;
    let scaled = tape.mul(omega_e, fem_out)?;
    tape.add(mixed, scaled)
}

/// One recorded attention matrix and the edge set it was normalized over.
pub struct AlphaRecord {
    pub alpha: Var,
    pub edges: Arc<GraphEdges>,
}

/// The terms of the second-stage loss and their weighted total.
pub struct PgLossTerms {
    pub total: Var,
    /// Mean (over nodes) squared coordinate error.
    pub pose: Var,
    /// Sum over layers, heads, and non-self edges of (alpha - 1)^2.
    pub edge: Var,
}

/// Second-stage loss: `0.02 * L_pose + 0.2 * L_edge`.  The edge term pulls
/// every recorded attention weight on a real (non-self) edge toward 1,
/// which together with row normalization discourages extreme weights;
/// self-loops are exempt because forcing them to 1 would contradict
/// normalization over rows with several neighbors.
pub fn loss_pg(tape: &mut Tape, pred: Var, target: Var, alphas: &[AlphaRecord]) -> Result<PgLossTerms> {
    let ps = tape.shape(pred).to_vec();
    if ps != tape.shape(target) {
        return Err(Error::shape(format!(
            "prediction {ps:?} and target {:?} differ",
            tape.shape(target)
        )));
    }
    if ps.len() != 2 || ps[1] != 3 {
        return Err(Error::shape(format!("expected [N, 3] coordinates, got {ps:?}")));
    }
    let n = ps[0];
    let d = tape.sub(pred, target)?;
    let d2 = tape.square(d);
    let sum = tape.sum_all(d2);
    let pose = tape.scale(sum, 1.0 / n as f64);

    let mut edge = tape.constant(&Tensor::scalar(0.0));
    for rec in alphas {
        let m = edge_mask(&rec.edges);
        let mask = tape.constant(&m);
        let on_edges = tape.mul(rec.alpha, mask)?;
        let diff = tape.sub(on_edges, mask)?;
        let sq = tape.square(diff);
        let s = tape.sum_all(sq);
        edge = tape.add(edge, s)?;
    }

    let tp = tape.scale(pose, LAMBDA_POSE);
    let te = tape.scale(edge, LAMBDA_EDGE);
    let total = tape.add(tp, te)?;
    Ok(PgLossTerms { total, pose, edge })
}

/// 1.0 on every directed non-self edge, 0 elsewhere.
fn edge_mask(edges: &GraphEdges) -> Tensor {
    let n = edges.n();
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for &j in edges.neighbors(i) {
            if j != i {
                data[i * n + j] = 1.0;
            }
        }
    }
    Tensor::new(vec![n, n], data).expect("square mask")
}

struct GatHeadIds {
    w: ParamId,
    attn: Option<(ParamId, ParamId)>, // (a_self, a_neigh); None in fixed mode
}

struct GatLayerIds {
    heads: Vec<GatHeadIds>,
    skip: ParamId,
}

struct FemIds {
    token_w: ParamId,
    token_b: ParamId,
    pos: ParamId,
    global: ParamId,
    self_q: ParamId,
    self_k: ParamId,
    self_v: ParamId,
    queries: ParamId,
    cross_q: ParamId,
    cross_k: ParamId,
    cross_v: ParamId,
    head_w: ParamId,
    head_b: ParamId,
}

struct SpiIds {
    embed: ParamId,
    layers: Vec<GatLayerIds>,
    head_w: ParamId,
    head_b: ParamId,
    omega_g: ParamId,
}

/// Everything the second stage produces for one sample.
pub struct PgOutputs {
    /// Final 21-joint coordinates `[21, 3]`.
    pub coords: Var,
    /// Structural-branch output, when that branch is enabled.
    pub spi_coords: Option<Var>,
    /// Enhancement-branch output, when that branch is enabled.
    pub fem_coords: Option<Var>,
    /// Assembled node features `[21, 3 + C]` (structural branch only).
    pub node_features: Option<Var>,
    /// Attention weights of every graph-attention head, layer-major.
    pub alphas: Vec<AlphaRecord>,
    /// Token-attention matrices (self, then cross), rows summing to 1.
    pub attn: Vec<Var>,
}

/// Parameter handles and the size plan of the second stage.
pub struct PgModel {
    supervised: Vec<usize>,
    gather_map: Vec<usize>,
    pin_map: Vec<usize>,
    feature_size: usize,
    sample_ratio: f64,
    fem_duplicate_tokens: bool,
    edge_mode: EdgeWeightMode,
    pin_tw: bool,
    spi: Option<SpiIds>,
    fem: Option<FemIds>,
    omega_e: Option<ParamId>,
    edges_one: Arc<GraphEdges>,
    edges_two: Arc<GraphEdges>,
}

impl PgModel {
    /// Registers all stage parameters under the `pg.` prefix.  With
    /// mean-pose embedding initialization the caller supplies the `[15, 3]`
    /// coordinates (training-set mean of the non-supervised joints, in
    /// refined-heatmap units).
    pub fn register(
        params: &mut ParamSet,
        cfg: &ModelConfig,
        embed_coords: Option<&Tensor>,
        rng: &mut ChaCha20Rng,
    ) -> Result<PgModel> {
        cfg.validate()?;
        if !cfg.spi && !cfg.fem {
            return Err(Error::config(
                "both branches disabled: at least one of spi/fem must be enabled".to_string(),
            ));
        }
        let supervised = cfg.supervised_joints()?;
        let j = supervised.len();
        let embedded: Vec<usize> = (0..NUM_JOINTS).filter(|x| !supervised.contains(x)).collect();
        let mut gather_map = vec![0usize; NUM_JOINTS];
        for (p, &joint) in supervised.iter().enumerate() {
            gather_map[joint] = p;
        }
        for (slot, &joint) in embedded.iter().enumerate() {
            gather_map[joint] = j + slot;
        }
        let pin_map: Vec<usize> = (0..NUM_JOINTS)
            .map(|joint| match supervised.iter().position(|&s| s == joint) {
                Some(p) => NUM_JOINTS + p,
                None => joint,
            })
            .collect();

        let c = cfg.feature_channels();
        let node_dim = 3 + c;
        let k = cfg.gat_heads;
        let head_width = cfg.spi_width / k;
        let d = cfg.fem_width;
        let hw = cfg.feature_size() * cfg.feature_size();

        let spi = if cfg.spi {
            let init = match cfg.embed_init {
                EmbedInit::Zeros => Tensor::zeros(&[embedded.len(), 3]),
                EmbedInit::MeanPose => match embed_coords {
                    Some(t) => {
                        if t.shape() != [embedded.len(), 3] {
                            return Err(Error::shape(format!(
                                "embedding init must be [{}, 3], got {:?}",
                                embedded.len(),
                                t.shape()
                            )));
                        }
                        t.clone()
                    }
                    None => {
                        return Err(Error::config(
                            "mean-pose embedding initialization needs the mean pose; pass embed_coords or switch embed_init to zeros".to_string(),
                        ))
                    }
                },
            };
            let embed = params.register("pg.embed.coords", init, ParamKind::Other)?;
            let mut layers = Vec::new();
            for l in 0..cfg.gat_layers {
                let f_in = if l == 0 { node_dim } else { cfg.spi_width };
                let mut heads = Vec::new();
                for h in 0..k {
                    let w = params.register(
                        &format!("pg.spi.layer{l}.head{h}.weight"),
                        params::linear_init(rng, f_in, head_width),
                        ParamKind::Weight,
                    )?;
                    let attn = match cfg.edge_weights {
                        EdgeWeightMode::Dynamic => {
                            let a_self = params.register(
                                &format!("pg.spi.layer{l}.head{h}.a_self"),
                                params::linear_init(rng, head_width, 1),
                                ParamKind::Weight,
                            )?;
                            let a_neigh = params.register(
                                &format!("pg.spi.layer{l}.head{h}.a_neigh"),
                                params::linear_init(rng, head_width, 1),
                                ParamKind::Weight,
                            )?;
                            Some((a_self, a_neigh))
                        }
                        EdgeWeightMode::Fixed => None,
                    };
                    heads.push(GatHeadIds { w, attn });
                }
                let skip = params.register(
                    &format!("pg.spi.layer{l}.skip.weight"),
                    params::linear_init(rng, node_dim, cfg.spi_width),
                    ParamKind::Weight,
                )?;
                layers.push(GatLayerIds { heads, skip });
            }
            let head_w = params.register(
                "pg.spi.head.weight",
                params::linear_init(rng, cfg.spi_width, 3),
                ParamKind::Weight,
            )?;
            let head_b = params.register("pg.spi.head.bias", Tensor::zeros(&[3]), ParamKind::Bias)?;
            let omega_g = params.register("pg.fuse.omega_g", params::eye(NUM_JOINTS), ParamKind::Weight)?;
            Some(SpiIds { embed, layers, head_w, head_b, omega_g })
        } else {
            None
        };

        let fem = if cfg.fem {
            let token_w = params.register("pg.fem.token.weight", params::linear_init(rng, c, d), ParamKind::Weight)?;
            let token_b = params.register("pg.fem.token.bias", Tensor::zeros(&[d]), ParamKind::Bias)?;
            let pos = params.register("pg.fem.pos", params::he_uniform(rng, &[hw, d], d), ParamKind::Other)?;
            let global = params.register("pg.fem.global", params::he_uniform(rng, &[1, d], d), ParamKind::Other)?;
            let self_q = params.register("pg.fem.self.q", params::linear_init(rng, d, d), ParamKind::Weight)?;
            let self_k = params.register("pg.fem.self.k", params::linear_init(rng, d, d), ParamKind::Weight)?;
            let self_v = params.register("pg.fem.self.v", params::linear_init(rng, d, d), ParamKind::Weight)?;
            let queries =
                params.register("pg.fem.queries", params::he_uniform(rng, &[NUM_JOINTS, d], d), ParamKind::Other)?;
            let cross_q = params.register("pg.fem.cross.q", params::linear_init(rng, d, d), ParamKind::Weight)?;
            let cross_k = params.register("pg.fem.cross.k", params::linear_init(rng, d, d), ParamKind::Weight)?;
            let cross_v = params.register("pg.fem.cross.v", params::linear_init(rng, d, d), ParamKind::Weight)?;
            let head_w = params.register("pg.fem.head.weight", params::linear_init(rng, d, 3), ParamKind::Weight)?;
            let head_b = params.register("pg.fem.head.bias", Tensor::zeros(&[3]), ParamKind::Bias)?;
            Some(FemIds {
                token_w,
                token_b,
                pos,
                global,
                self_q,
                self_k,
                self_v,
                queries,
                cross_q,
                cross_k,
                cross_v,
                head_w,
                head_b,
            })
        } else {
            None
        };

        let omega_e = if cfg.fem {
            Some(params.register("pg.fuse.omega_e", Tensor::full(&[NUM_JOINTS, 1], 1.0), ParamKind::Weight)?)
        } else {
            None
        };

        let edges_one = Arc::new(skeleton::one_hop());
        let edges_two = Arc::new(edges_one.two_hop());

        Ok(PgModel {
            supervised,
            gather_map,
            pin_map,
            feature_size: cfg.feature_size(),
            sample_ratio: cfg.feature_size() as f64 / cfg.refined_size() as f64,
            fem_duplicate_tokens: cfg.fem_duplicate_tokens,
            edge_mode: cfg.edge_weights,
            pin_tw: cfg.pin_tw_joints,
            spi,
            fem,
            omega_e,
            edges_one,
            edges_two,
        })
    }

    /// Joint indices whose coordinates come from the first stage.
    pub fn supervised(&self) -> &[usize] {
        &self.supervised
    }

    /// Runs the stage.  `tw_coords` is `[J, 3]` (first-stage soft-argmax
    /// output or its cached value), `featmap` is `[C, fm, fm]`.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], tw_coords: Var, featmap: Var) -> Result<PgOutputs> {
        let js = tape.shape(tw_coords).to_vec();
        if js != [self.supervised.len(), 3] {
            return Err(Error::shape(format!(
                "expected [{}, 3] first-stage coordinates, got {js:?}",
                self.supervised.len()
            )));
        }
        let fs = tape.shape(featmap).to_vec();
        if fs.len() != 3 || fs[1] != self.feature_size || fs[2] != self.feature_size {
            return Err(Error::shape(format!("expected [C, {0}, {0}] feature map, got {fs:?}", self.feature_size)));
        }

        let mut alphas = Vec::new();
        let mut attn = Vec::new();
        let mut node_features = None;

        let spi_coords = match &self.spi {
            Some(ids) => {
                // Assemble the joint graph: known coordinates for supervised
                // joints, learned embeddings for the rest, then sample each
                // node's feature column at its (x, y).
                let embed = vars[ids.embed.index()];
                let stacked = tape.concat(&[tw_coords, embed], 0)?;
                let coords21 = tape.gather_rows(stacked, &self.gather_map)?;
                let r = self.sample_ratio;
                let sel = tape.constant(&Tensor::new(vec![3, 2], vec![r, 0.0, 0.0, r, 0.0, 0.0])?);
                let points = tape.matmul(coords21, sel)?;
                let feats = tape.grid_sample_bilinear(featmap, points)?;
                let h0 = tape.concat(&[coords21, feats], 1)?;
                node_features = Some(h0);

                let mut h = h0;
                for (l, layer) in ids.layers.iter().enumerate() {
                    let edges = if l == 0 { &self.edges_one } else { &self.edges_two };
                    let (gat_out, layer_alphas) = match self.edge_mode {
                        EdgeWeightMode::Dynamic => {
                            let heads: Vec<GatHeadVars> = layer
                                .heads
                                .iter()
                                .map(|hd| {
                                    let (a_self, a_neigh) = hd.attn.expect("dynamic mode has attention vectors");
                                    GatHeadVars {
                                        w: vars[hd.w.index()],
                                        a_self: vars[a_self.index()],
                                        a_neigh: vars[a_neigh.index()],
                                    }
                                })
                                .collect();
                            gat_layer(tape, h, &heads, edges)?
                        }
                        EdgeWeightMode::Fixed => {
                            let ws: Vec<Var> = layer.heads.iter().map(|hd| vars[hd.w.index()]).collect();
                            gat_layer_fixed(tape, h, &ws, edges)?
                        }
                    };
                    for alpha in layer_alphas {
                        alphas.push(AlphaRecord { alpha, edges: Arc::clone(edges) });
                    }
                    let skip = tape.matmul(h0, vars[layer.skip.index()])?;
                    let summed = tape.add(gat_out, skip)?;
                    h = tape.leaky_relu(summed);
                }
                let projected = tape.matmul(h, vars[ids.head_w.index()])?;
                Some(tape.add(projected, vars[ids.head_b.index()])?)
            }
            None => None,
        };

        let fem_coords = match &self.fem {
            Some(ids) => {
                let c = tape.shape(featmap)[0];
                let hw = self.feature_size * self.feature_size;
                let flat = tape.reshape(featmap, &[c, hw])?;
                let cols = tape.transpose2d(flat)?;
                let projected = tape.matmul(cols, vars[ids.token_w.index()])?;
                let tokens = tape.add(projected, vars[ids.token_b.index()])?;
                let with_pos = tape.add(tokens, vars[ids.pos.index()])?;
                let global = vars[ids.global.index()];
                let seq = if self.fem_duplicate_tokens {
                    tape.concat(&[tokens, with_pos, global], 0)?
                } else {
                    tape.concat(&[with_pos, global], 0)?
                };

                let q = tape.matmul(seq, vars[ids.self_q.index()])?;
                let k = tape.matmul(seq, vars[ids.self_k.index()])?;
                let v = tape.matmul(seq, vars[ids.self_v.index()])?;
                let (sa, sa_attn) = scaled_dot_attention(tape, q, k, v)?;
                attn.push(sa_attn);
                let enhanced = tape.add(seq, sa)?;

                let queries = vars[ids.queries.index()];
                let cq = tape.matmul(queries, vars[ids.cross_q.index()])?;
                let ck = tape.matmul(enhanced, vars[ids.cross_k.index()])?;
                let cv = tape.matmul(enhanced, vars[ids.cross_v.index()])?;
                let (ca, ca_attn) = scaled_dot_attention(tape, cq, ck, cv)?;
                attn.push(ca_attn);
                let projected = tape.matmul(ca, vars[ids.head_w.index()])?;
                Some(tape.add(projected, vars[ids.head_b.index()])?)
            }
            None => None,
        };

        let fused = match (spi_coords, fem_coords) {
            (Some(s), Some(f)) => {
                let ids = self.spi.as_ref().expect("spi ids");
                let omega_e = self.omega_e.expect("omega_e");
                fuse(tape, s, f, vars[ids.omega_g.index()], vars[omega_e.index()])?
            }
            (Some(s), None) => {
                let ids = self.spi.as_ref().expect("spi ids");
                tape.matmul(vars[ids.omega_g.index()], s)?
            }
            (None, Some(f)) => {
                let omega_e = self.omega_e.expect("omega_e");
                tape.mul(vars[omega_e.index()], f)?
            }
            (None, None) => unreachable!("register rejects both branches disabled"),
        };

        let coords = if self.pin_tw {
            let stacked = tape.concat(&[fused, tw_coords], 0)?;
            tape.gather_rows(stacked, &self.pin_map)?
        } else {
            fused
        };

        Ok(PgOutputs { coords, spi_coords, fem_coords, node_features, alphas, attn })
    }
}
