use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Geu, Linear, MixtureHead, NetVlad, Transformer};
use super::params::{ParamId, ParamStore, Session};
use super::{EncoderError, ModalityId, ModelConfig, QueryRepr, Result, VideoRepr, MODALITIES};
use crate::corpus::{Dims, Stream};
use crate::tensor::{Tensor, Var};

/// Expert-feature widths the encoders are built for.
pub type FeatureDims = Dims;

/// How caption word embeddings are summarized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaptionAggregation {
    /// Learned summary token through the query transformer (the speech query path).
    Pooled,
    /// Soft-assignment residual aggregation of the word embeddings.
    Netvlad,
}

/// Per-modality embeddings on the tape; absent parts are zero rows.
#[derive(Debug, Clone, Copy)]
pub struct VideoOut {
    pub parts: [Var; 3],
}

/// Per-modality query embeddings `[n, d]` and mixture weights `[n, 3]`.
#[derive(Debug, Clone, Copy)]
pub struct QueryOut {
    pub parts: [Var; 3],
    pub weights: Var,
}

#[derive(Debug, Clone)]
struct VideoEncoder {
    proj: [Linear; 3],
    modality: [ParamId; 3],
    agg: [ParamId; 3],
    temporal: ParamId,
    transformer: Transformer,
    geu: [Geu; 3],
}

#[derive(Debug, Clone)]
struct QueryEncoder {
    proj: [Linear; 3],
    modality: [ParamId; 3],
    /// Summary-token offset for RGB/audio (added to the max-pool); learned
    /// summary token for speech.
    summary: [ParamId; 3],
    temporal: ParamId,
    transformer: Transformer,
    geu: [Geu; 3],
}

#[derive(Debug, Clone)]
struct CaptionEncoder {
    embed: ParamId,
    vlad: Option<NetVlad>,
    geu: Option<[Geu; 3]>,
    mix: MixtureHead,
}

/// Video encoder Ψ, pre-training query encoder Φ and caption encoder with
/// their parameters. Parameter names start with `psi.`, `phi.` or `cap.`.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub dims: FeatureDims,
    pub params: ParamStore,
    psi: VideoEncoder,
    phi: QueryEncoder,
    cap: CaptionEncoder,
}

const EMBED_STD: f64 = 0.02;

fn per_modality<T>(mut f: impl FnMut(ModalityId) -> T) -> [T; 3] {
    MODALITIES.map(&mut f)
}

impl Model {
    /// Builds a freshly initialized model. `codebook` (`[vocab, D_asr]`)
    /// seeds the caption word embeddings.
    pub fn new(cfg: &ModelConfig, dims: FeatureDims, codebook: &Tensor, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if codebook.shape() != [cfg.vocab_size, dims.asr] {
            return Err(EncoderError::Config(format!(
                "codebook shape {:?} does not match vocab_size {} x asr dim {}",
                codebook.shape(),
                cfg.vocab_size,
                dims.asr
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(cfg.init_seed_offset));
        let d = cfg.d_model;
        let mut p = ParamStore::new();

        let psi = VideoEncoder {
            proj: per_modality(|m| Linear::new(&mut p, &format!("psi.{m}.proj"), dims.get(m), d, &mut rng)),
            modality: per_modality(|m| p.add_normal(format!("psi.{m}.modality"), 1, d, EMBED_STD, &mut rng)),
            agg: per_modality(|m| p.add_normal(format!("psi.{m}.agg"), 1, d, EMBED_STD, &mut rng)),
            temporal: p.add_normal("psi.temporal", cfg.max_time, d, EMBED_STD, &mut rng),
            transformer: Transformer::new(&mut p, "psi", cfg.n_layers, cfg.n_heads, d, cfg.d_ff, &mut rng),
            geu: per_modality(|m| Geu::new(&mut p, &format!("psi.geu.{m}"), d, d, &mut rng)),
        };
        let phi = QueryEncoder {
            proj: per_modality(|m| Linear::new(&mut p, &format!("phi.{m}.proj"), dims.get(m), d, &mut rng)),
            modality: per_modality(|m| p.add_normal(format!("phi.{m}.modality"), 1, d, EMBED_STD, &mut rng)),
            summary: per_modality(|m| p.add_normal(format!("phi.{m}.summary"), 1, d, EMBED_STD, &mut rng)),
            temporal: p.add_normal("phi.temporal", cfg.max_time, d, EMBED_STD, &mut rng),
            transformer: Transformer::new(&mut p, "phi", cfg.n_layers, cfg.n_heads, d, cfg.d_ff, &mut rng),
            geu: per_modality(|m| Geu::new(&mut p, &format!("phi.geu.{m}"), d, d, &mut rng)),
        };
        let embed = p.add("cap.embed", codebook.clone());
        let cap = match cfg.aggregation {
            CaptionAggregation::Pooled => CaptionEncoder {
                embed,
                vlad: None,
                geu: None,
                mix: MixtureHead::new(&mut p, "cap.mix", d, &mut rng),
            },
            CaptionAggregation::Netvlad => {
                let vlad = NetVlad::new(&mut p, "cap.vlad", d, cfg.netvlad_clusters, &mut rng);
                let k_d = vlad.output_dim(d);
                CaptionEncoder {
                    embed,
                    vlad: Some(vlad),
                    geu: Some(per_modality(|m| Geu::new(&mut p, &format!("cap.geu.{m}"), k_d, d, &mut rng))),
                    mix: MixtureHead::new(&mut p, "cap.mix", k_d, &mut rng),
                }
            }
        };
        Ok(Self {
            cfg: cfg.clone(),
            dims,
            params: p,
            psi,
            phi,
            cap,
        })
    }

    /// Rebuilds a model around stored parameters. Every parameter the
    /// configuration declares must be present with a matching shape.
    pub fn from_params(cfg: &ModelConfig, dims: FeatureDims, params: &ParamStore) -> Result<Self> {
        let codebook = params
            .id("cap.embed")
            .map(|id| params.get(id).clone())
            .ok_or_else(|| EncoderError::Config("stored parameters lack cap.embed".into()))?;
        let mut model = Self::new(cfg, dims, &codebook, 0)?;
        for (_, name, _) in model.params.iter() {
            if params.id(name).is_none() {
                return Err(EncoderError::Config(format!("stored parameters lack {name}")));
            }
        }
        model.params.load_matching(params)?;
        Ok(model)
    }

    pub fn d_model(&self) -> usize {
        self.cfg.d_model
    }

    /// Trainability per parameter. Caption word embeddings follow
    /// `train_caption_embeddings`; `freeze_query` additionally freezes every
    /// query-side (`phi.`, `cap.`) parameter.
    pub fn trainable_mask(&self, freeze_query: bool) -> Vec<bool> {
        self.params
            .iter()
            .map(|(id, name, _)| {
                if id == self.cap.embed && !self.cfg.train_caption_embeddings {
                    false
                } else {
                    !(freeze_query && (name.starts_with("phi.") || name.starts_with("cap.")))
                }
            })
            .collect()
    }

    fn check_stream(&self, m: ModalityId, s: &Stream) -> Result<()> {
        if s.dim() != self.dims.get(m) {
            return Err(EncoderError::FeatureDim {
                modality: m,
                expected: self.dims.get(m),
                got: s.dim(),
            });
        }
        Ok(())
    }

    fn temporal_rows(&self, s: &mut Session, table: ParamId, times: &[u32]) -> Result<Var> {
        let last = self.cfg.max_time - 1;
        let idx: Vec<usize> = times.iter().map(|&t| (t as usize).min(last)).collect();
        let t = s.p(table);
        Ok(s.graph.embedding(t, &idx)?)
    }

    /// Encodes one clip. `None` and empty streams are absent modalities: no
    /// tokens, zero output. Absent inputs are never read.
    pub fn encode_video(&self, s: &mut Session, streams: [Option<&Stream>; 3]) -> Result<VideoOut> {
        let d = self.cfg.d_model;
        let mut present = Vec::new();
        let mut aggs = Vec::new();
        let mut tokens = Vec::new();
        for m in MODALITIES {
            let Some(st) = streams[m.index()].filter(|st| !st.is_empty()) else {
                continue;
            };
            self.check_stream(m, st)?;
            if st.len() > self.cfg.caps.get(m) {
                return Err(EncoderError::OverCap(m));
            }
            let i = m.index();
            let x = s.graph.constant(Tensor::matrix(st.len(), st.dim(), st.features.data().to_vec())?);
            let h = self.psi.proj[i].forward(s, x)?;
            let pooled = s.graph.max_pool_rows(h)?;
            let agg_emb = s.p(self.psi.agg[i]);
            aggs.push(s.graph.add(pooled, agg_emb)?);
            let me = s.p(self.psi.modality[i]);
            let mut tok = s.graph.add_row(h, me)?;
            if self.cfg.temporal_psi {
                let te = self.temporal_rows(s, self.psi.temporal, &st.times)?;
                tok = s.graph.add(tok, te)?;
            }
            tokens.push(tok);
            present.push(m);
        }
        if present.is_empty() {
            return Err(EncoderError::NoModality);
        }
        let n_agg = aggs.len();
        let mut seq = aggs;
        seq.extend(tokens);
        let x = s.graph.concat(&seq, 0)?;
        let y = self.psi.transformer.forward(s, x)?;
        let zero = s.graph.constant(Tensor::zeros(vec![1, d]));
        let mut parts = [zero; 3];
        for (slot, m) in present.iter().enumerate().take(n_agg) {
            let row = s.graph.slice(y, 0, slot, 1)?;
            parts[m.index()] = self.psi.geu[m.index()].forward(s, row)?;
        }
        Ok(VideoOut { parts })
    }

    /// Query encoder for the supervising modality's tokens. RGB/audio use a
    /// max-pool summary token, speech a learned one; no temporal embeddings
    /// unless `temporal_phi` is set. Weights are uniform.
    pub fn encode_query_pretrain(&self, s: &mut Session, supervising: ModalityId, stream: &Stream) -> Result<QueryOut> {
        if stream.is_empty() {
            return Err(EncoderError::EmptyQuery(supervising.name()));
        }
        self.check_stream(supervising, stream)?;
        let i = supervising.index();
        let x = s
            .graph
            .constant(Tensor::matrix(stream.len(), stream.dim(), stream.features.data().to_vec())?);
        let h = self.phi.proj[i].forward(s, x)?;
        let summary = s.p(self.phi.summary[i]);
        let summary = if supervising == ModalityId::Asr {
            summary
        } else {
            let pooled = s.graph.max_pool_rows(h)?;
            s.graph.add(pooled, summary)?
        };
        let me = s.p(self.phi.modality[i]);
        let mut tok = s.graph.add_row(h, me)?;
        if self.cfg.temporal_phi {
            let te = self.temporal_rows(s, self.phi.temporal, &stream.times)?;
            tok = s.graph.add(tok, te)?;
        }
        let summary_out = self.phi_summary(s, summary, tok)?;
        let parts = self.phi_parts(s, summary_out)?;
        let weights = s.graph.constant(Tensor::row(vec![1.0 / 3.0; 3]));
        Ok(QueryOut { parts, weights })
    }

    fn phi_summary(&self, s: &mut Session, summary: Var, tokens: Var) -> Result<Var> {
        let x = s.graph.concat(&[summary, tokens], 0)?;
        let y = self.phi.transformer.forward(s, x)?;
        Ok(s.graph.slice(y, 0, 0, 1)?)
    }

    fn phi_parts(&self, s: &mut Session, summary: Var) -> Result<[Var; 3]> {
        let mut out = Vec::with_capacity(3);
        for g in &self.phi.geu {
            out.push(g.forward(s, summary)?);
        }
        Ok([out[0], out[1], out[2]])
    }

    /// Caption encoder: frozen-by-default word embeddings projected by the
    /// speech query projection, then NetVLAD or the pooled speech path.
    pub fn encode_query_caption(&self, s: &mut Session, tokens: &[u32]) -> Result<QueryOut> {
        if tokens.is_empty() {
            return Err(EncoderError::EmptyQuery("caption"));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.cfg.vocab_size) {
            return Err(EncoderError::OutOfVocab {
                token: t,
                vocab: self.cfg.vocab_size,
            });
        }
        let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let table = s.p(self.cap.embed);
        let e = s.graph.embedding(table, &idx)?;
        let asr = ModalityId::Asr.index();
        let h = self.phi.proj[asr].forward(s, e)?;
        let (parts, summary) = match (&self.cap.vlad, &self.cap.geu) {
            (Some(vlad), Some(geu)) => {
                let v = vlad.forward(s, h)?;
                let mut out = Vec::with_capacity(3);
                for g in geu {
                    out.push(g.forward(s, v)?);
                }
                ([out[0], out[1], out[2]], v)
            }
            _ => {
                let me = s.p(self.phi.modality[asr]);
                let tok = s.graph.add_row(h, me)?;
                let cls = s.p(self.phi.summary[asr]);
                let sum = self.phi_summary(s, cls, tok)?;
                (self.phi_parts(s, sum)?, sum)
            }
        };
        let weights = self.cap.mix.forward(s, summary)?;
        Ok(QueryOut { parts, weights })
    }

    /// Stacks per-item outputs into `[n, d]` parts (and `[n, 3]` weights).
    pub fn stack_videos(s: &mut Session, items: &[VideoOut]) -> Result<VideoOut> {
        let mut parts = Vec::with_capacity(3);
        for m in 0..3 {
            let rows: Vec<Var> = items.iter().map(|v| v.parts[m]).collect();
            parts.push(s.graph.concat(&rows, 0)?);
        }
        Ok(VideoOut {
            parts: [parts[0], parts[1], parts[2]],
        })
    }

    pub fn stack_queries(s: &mut Session, items: &[QueryOut]) -> Result<QueryOut> {
        let mut parts = Vec::with_capacity(3);
        for m in 0..3 {
            let rows: Vec<Var> = items.iter().map(|q| q.parts[m]).collect();
            parts.push(s.graph.concat(&rows, 0)?);
        }
        let w: Vec<Var> = items.iter().map(|q| q.weights).collect();
        let weights = s.graph.concat(&w, 0)?;
        Ok(QueryOut {
            parts: [parts[0], parts[1], parts[2]],
            weights,
        })
    }

    /// Video representation outside any training graph.
    pub fn video_repr(&self, streams: [Option<&Stream>; 3]) -> Result<VideoRepr> {
        let mut s = Session::eval(&self.params);
        let out = self.encode_video(&mut s, streams)?;
        Ok(VideoRepr::new(out.parts.map(|p| s.graph.value(p).data().to_vec())))
    }

    pub fn caption_repr(&self, tokens: &[u32]) -> Result<QueryRepr> {
        let mut s = Session::eval(&self.params);
        let out = self.encode_query_caption(&mut s, tokens)?;
        Ok(query_repr(&s, &out))
    }

    pub fn pretrain_query_repr(&self, supervising: ModalityId, stream: &Stream) -> Result<QueryRepr> {
        let mut s = Session::eval(&self.params);
        let out = self.encode_query_pretrain(&mut s, supervising, stream)?;
        Ok(query_repr(&s, &out))
    }

    /// NetVLAD stage of the caption encoder, if configured.
    pub fn caption_netvlad(&self) -> Option<&NetVlad> {
        self.cap.vlad.as_ref()
    }

    pub fn caption_geus(&self) -> Option<&[Geu; 3]> {
        self.cap.geu.as_ref()
    }

    pub fn video_geus(&self) -> &[Geu; 3] {
        &self.psi.geu
    }

    pub fn query_projection(&self, m: ModalityId) -> &Linear {
        &self.phi.proj[m.index()]
    }
}

fn query_repr(s: &Session, out: &QueryOut) -> QueryRepr {
    let w = s.graph.value(out.weights).data();
    QueryRepr::new(
        out.parts.map(|p| s.graph.value(p).data().to_vec()),
        [w[0], w[1], w[2]],
    )
}
