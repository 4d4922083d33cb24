//! Learnable weights, generic over storage so the same structure can hold
//! tensors, tape handles, or gradients.

use std::convert::Infallible;

/// Dual-normalized linear patch projection.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchEmbedding<T> {
    pub pre_gamma: T,
    pub pre_beta: T,
    pub proj_w: T,
    pub proj_b: T,
    pub post_gamma: T,
    pub post_beta: T,
}

/// Pre-LN transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer<T> {
    pub ln1_gamma: T,
    pub ln1_beta: T,
    pub qkv_w: T,
    pub qkv_b: T,
    pub out_w: T,
    pub out_b: T,
    pub ln2_gamma: T,
    pub ln2_beta: T,
    pub mlp_in_w: T,
    pub mlp_in_b: T,
    pub mlp_out_w: T,
    pub mlp_out_b: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Weights<T> {
    pub embeddings: Vec<PatchEmbedding<T>>,
    pub cls_token: T,
    pub pos_embedding: T,
    pub layers: Vec<EncoderLayer<T>>,
    pub final_gamma: T,
    pub final_beta: T,
    pub head_hidden_w: T,
    pub head_hidden_b: T,
    pub head_out_w: T,
    pub head_out_b: T,
}

type Visitor<'f, T, U, E> = dyn FnMut(String, &T) -> Result<U, E> + 'f;

impl<T> PatchEmbedding<T> {
    fn try_map<U, E>(&self, p: &str, f: &mut Visitor<'_, T, U, E>) -> Result<PatchEmbedding<U>, E> {
        Ok(PatchEmbedding {
            pre_gamma: f(format!("{p}.pre_norm.gamma"), &self.pre_gamma)?,
            pre_beta: f(format!("{p}.pre_norm.beta"), &self.pre_beta)?,
            proj_w: f(format!("{p}.proj.weight"), &self.proj_w)?,
            proj_b: f(format!("{p}.proj.bias"), &self.proj_b)?,
            post_gamma: f(format!("{p}.post_norm.gamma"), &self.post_gamma)?,
            post_beta: f(format!("{p}.post_norm.beta"), &self.post_beta)?,
        })
    }

    fn refs_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        out.extend([
            &mut self.pre_gamma,
            &mut self.pre_beta,
            &mut self.proj_w,
            &mut self.proj_b,
            &mut self.post_gamma,
            &mut self.post_beta,
        ]);
    }
}

impl<T> EncoderLayer<T> {
    fn try_map<U, E>(&self, p: &str, f: &mut Visitor<'_, T, U, E>) -> Result<EncoderLayer<U>, E> {
        Ok(EncoderLayer {
            ln1_gamma: f(format!("{p}.ln1.gamma"), &self.ln1_gamma)?,
            ln1_beta: f(format!("{p}.ln1.beta"), &self.ln1_beta)?,
            qkv_w: f(format!("{p}.attn.qkv.weight"), &self.qkv_w)?,
            qkv_b: f(format!("{p}.attn.qkv.bias"), &self.qkv_b)?,
            out_w: f(format!("{p}.attn.out.weight"), &self.out_w)?,
            out_b: f(format!("{p}.attn.out.bias"), &self.out_b)?,
            ln2_gamma: f(format!("{p}.ln2.gamma"), &self.ln2_gamma)?,
            ln2_beta: f(format!("{p}.ln2.beta"), &self.ln2_beta)?,
            mlp_in_w: f(format!("{p}.mlp.fc1.weight"), &self.mlp_in_w)?,
            mlp_in_b: f(format!("{p}.mlp.fc1.bias"), &self.mlp_in_b)?,
            mlp_out_w: f(format!("{p}.mlp.fc2.weight"), &self.mlp_out_w)?,
            mlp_out_b: f(format!("{p}.mlp.fc2.bias"), &self.mlp_out_b)?,
        })
    }

    fn refs_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        out.extend([
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.qkv_w,
            &mut self.qkv_b,
            &mut self.out_w,
            &mut self.out_b,
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
            &mut self.mlp_in_w,
            &mut self.mlp_in_b,
            &mut self.mlp_out_w,
            &mut self.mlp_out_b,
        ]);
    }
}

impl<T> Weights<T> {
    /// Maps every weight in canonical order, passing its dotted name.
    pub fn try_map<U, E>(&self, f: &mut Visitor<'_, T, U, E>) -> Result<Weights<U>, E> {
        let embeddings = self
            .embeddings
            .iter()
            .enumerate()
            .map(|(i, e)| e.try_map(&format!("embed.{i}"), f))
            .collect::<Result<_, _>>()?;
        let cls_token = f("cls_token".into(), &self.cls_token)?;
        let pos_embedding = f("pos_embedding".into(), &self.pos_embedding)?;
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| l.try_map(&format!("layers.{i}"), f))
            .collect::<Result<_, _>>()?;
        Ok(Weights {
            embeddings,
            cls_token,
            pos_embedding,
            layers,
            final_gamma: f("final_norm.gamma".into(), &self.final_gamma)?,
            final_beta: f("final_norm.beta".into(), &self.final_beta)?,
            head_hidden_w: f("head.fc1.weight".into(), &self.head_hidden_w)?,
            head_hidden_b: f("head.fc1.bias".into(), &self.head_hidden_b)?,
            head_out_w: f("head.fc2.weight".into(), &self.head_out_w)?,
            head_out_b: f("head.fc2.bias".into(), &self.head_out_b)?,
        })
    }

    pub fn map<U>(&self, mut f: impl FnMut(String, &T) -> U) -> Weights<U> {
        let r: Result<_, Infallible> = self.try_map(&mut |n, t| Ok(f(n, t)));
        let Ok(w) = r;
        w
    }

    /// Names and references in canonical order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut names = Vec::new();
        self.map(|n, _| names.push(n));
        names.into_iter().zip(self.iter()).collect()
    }

    /// References in canonical order.
    pub fn iter(&self) -> impl Iterator<Item = &T> {
        let mut out: Vec<&T> = Vec::new();
        for e in &self.embeddings {
            out.extend([
                &e.pre_gamma,
                &e.pre_beta,
                &e.proj_w,
                &e.proj_b,
                &e.post_gamma,
                &e.post_beta,
            ]);
        }
        out.push(&self.cls_token);
        out.push(&self.pos_embedding);
        for l in &self.layers {
            out.extend([
                &l.ln1_gamma,
                &l.ln1_beta,
                &l.qkv_w,
                &l.qkv_b,
                &l.out_w,
                &l.out_b,
                &l.ln2_gamma,
                &l.ln2_beta,
                &l.mlp_in_w,
                &l.mlp_in_b,
                &l.mlp_out_w,
                &l.mlp_out_b,
            ]);
        }
        out.extend([
            &self.final_gamma,
            &self.final_beta,
            &self.head_hidden_w,
            &self.head_hidden_b,
            &self.head_out_w,
            &self.head_out_b,
        ]);
        out.into_iter()
    }

    /// Mutable references in canonical order.
    pub fn tensors_mut(&mut self) -> Vec<&mut T> {
        let mut out: Vec<&mut T> = Vec::new();
        for e in &mut self.embeddings {
            e.refs_mut(&mut out);
        }
        out.push(&mut self.cls_token);
        out.push(&mut self.pos_embedding);
        for l in &mut self.layers {
            l.refs_mut(&mut out);
        }
        out.extend([
            &mut self.final_gamma,
            &mut self.final_beta,
            &mut self.head_hidden_w,
            &mut self.head_hidden_b,
            &mut self.head_out_w,
            &mut self.head_out_b,
        ]);
        out
    }

    /// Rebuilds a structure of the same layout from values in canonical
    /// order. Returns `None` if the count does not match.
    pub fn from_ordered<U>(&self, values: Vec<U>) -> Option<Weights<U>> {
        if values.len() != self.iter().count() {
            return None;
        }
        let mut it = values.into_iter();
        Some(self.map(|_, _| it.next().expect("length checked")))
    }
}
