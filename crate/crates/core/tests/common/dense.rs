//! Row-by-row reference implementation of the model's forward pass, reading
//! weights by name. Nothing here calls the crate's kernels.

use hiersparse::graph::ParamStore;

use super::simplex_projection_oracle;

pub type Rows = Vec<Vec<f64>>;

pub struct Dense<'a> {
    pub p: &'a ParamStore<f64>,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub eps: f64,
    pub prefix: String,
}

fn mat(p: &ParamStore<f64>, name: &str) -> Rows {
    let t = p.get(p.id(name).unwrap_or_else(|| panic!("no tensor {name}")));
    if t.rank() == 1 {
        return vec![t.data().to_vec()];
    }
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

pub fn matmul(a: &Rows, b: &Rows) -> Rows {
    a.iter()
        .map(|row| (0..b[0].len()).map(|j| row.iter().zip(b).map(|(x, br)| x * br[j]).sum()).collect())
        .collect()
}

fn add(a: &Rows, b: &Rows) -> Rows {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect()).collect()
}

fn add_bias(a: &Rows, b: &[f64]) -> Rows {
    a.iter().map(|x| x.iter().zip(b).map(|(u, v)| u + v).collect()).collect()
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn log_softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    v.iter().map(|x| x - lse).collect()
}

fn cols(a: &Rows, start: usize, end: usize) -> Rows {
    a.iter().map(|r| r[start..end].to_vec()).collect()
}

fn sinusoid(pos: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|i| {
            let pair = (i / 2 * 2) as f64;
            let angle = pos as f64 / 10000f64.powf(pair / dim as f64);
            if i % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

pub fn mean_rows(a: &[Vec<f64>]) -> Vec<f64> {
    let n = a.len() as f64;
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).sum::<f64>() / n).collect()
}

impl<'a> Dense<'a> {
    fn w(&self, name: &str) -> Rows {
        mat(self.p, &format!("{}{name}", self.prefix))
    }

    fn ln(&self, x: &Rows, name: &str) -> Rows {
        let gain = self.w(&format!("{name}.gain"))[0].clone();
        let bias = self.w(&format!("{name}.bias"))[0].clone();
        x.iter()
            .map(|r| {
                let n = r.len() as f64;
                let mean = r.iter().sum::<f64>() / n;
                let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                r.iter().enumerate().map(|(i, v)| (v - mean) / (var + self.eps).sqrt() * gain[i] + bias[i]).collect()
            })
            .collect()
    }

    fn ff(&self, x: &Rows, name: &str) -> Rows {
        let h = add_bias(&matmul(x, &self.w(&format!("{name}.w1"))), &self.w(&format!("{name}.b1"))[0]);
        let h: Rows = h.into_iter().map(|r| r.into_iter().map(|v| v.max(0.0)).collect()).collect();
        add_bias(&matmul(&h, &self.w(&format!("{name}.w2"))), &self.w(&format!("{name}.b2"))[0])
    }

    fn mha(&self, xq: &Rows, xkv: &Rows, name: &str, causal: bool) -> Rows {
        let q = matmul(xq, &self.w(&format!("{name}.wq")));
        let k = matmul(xkv, &self.w(&format!("{name}.wk")));
        let v = matmul(xkv, &self.w(&format!("{name}.wv")));
        let dk = self.dim / self.heads;
        let mut concat = vec![vec![0.0; self.dim]; xq.len()];
        for h in 0..self.heads {
            let (s, e) = (h * dk, (h + 1) * dk);
            for i in 0..xq.len() {
                let open = if causal { i + 1 } else { k.len() };
                let scores: Vec<f64> = (0..open)
                    .map(|j| (s..e).map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dk as f64).sqrt())
                    .collect();
                let w = softmax(&scores);
                for c in s..e {
                    concat[i][c] = (0..open).map(|j| w[j] * v[j][c]).sum();
                }
            }
        }
        matmul(&concat, &self.w(&format!("{name}.wo")))
    }

    fn embed(&self, ids: &[usize], table: &str) -> Rows {
        let t = self.w(table);
        ids.iter()
            .enumerate()
            .map(|(pos, &id)| t[id].iter().zip(sinusoid(pos, self.dim)).map(|(e, pe)| e * (self.dim as f64).sqrt() + pe).collect())
            .collect()
    }

    pub fn encode(&self, src: &[usize]) -> Rows {
        let mut x = self.embed(src, "src_emb");
        for l in 0..self.layers {
            let p = format!("enc.{l}");
            let a = self.mha(&x, &x, &format!("{p}.self"), false);
            x = self.ln(&add(&x, &a), &format!("{p}.ln1"));
            let f = self.ff(&x, &format!("{p}.ff"));
            x = self.ln(&add(&x, &f), &format!("{p}.ln2"));
        }
        x
    }

    /// Returns the last layer's source-attention output and the final states.
    pub fn decode(&self, prefix: &[usize], memory: &Rows) -> (Rows, Rows) {
        let mut y = self.embed(prefix, "tgt_emb");
        let mut last = Vec::new();
        for l in 0..self.layers {
            let p = format!("dec.{l}");
            let a = self.mha(&y, &y, &format!("{p}.self"), true);
            y = self.ln(&add(&y, &a), &format!("{p}.ln1"));
            let c = self.mha(&y, memory, &format!("{p}.src"), false);
            y = self.ln(&add(&y, &c), &format!("{p}.ln2"));
            last = c;
            let f = self.ff(&y, &format!("{p}.ff"));
            y = self.ln(&add(&y, &f), &format!("{p}.ln3"));
        }
        (last, y)
    }

    pub fn project(&self, h: &Rows) -> Rows {
        add_bias(&matmul(h, &self.w("out.w")), &self.w("out.b")[0])
    }

    pub fn sentence_logits(&self, src: &[usize], prefix: &[usize]) -> Rows {
        let z = self.encode(src);
        self.project(&self.decode(prefix, &z).1)
    }

    /// Hierarchical context layer with softmax word weights for queries of
    /// sentence `j`, keys/values given per sentence; `open` lists the
    /// sentences the queries may see.
    pub fn hier_context(&self, queries: &Rows, k_words: &[Rows], v_words: &[Rows], open: &[usize]) -> Rows {
        let q_s = matmul(queries, &self.w("ctx.attn.q_s"));
        let q_w = matmul(queries, &self.w("ctx.attn.q_w"));
        let k_s: Vec<Vec<f64>> = k_words.iter().map(|k| mean_rows(k)).collect();
        let k_s = matmul(&k_s, &self.w("ctx.attn.k_s"));
        let k_w: Vec<Rows> = k_words.iter().map(|k| matmul(k, &self.w("ctx.attn.k_w"))).collect();
        let v_w: Vec<Rows> = v_words.iter().map(|v| matmul(v, &self.w("ctx.attn.v_w"))).collect();
        let dk = self.dim / self.heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut concat = vec![vec![0.0; self.dim]; queries.len()];
        for h in 0..self.heads {
            let (s, e) = (h * dk, (h + 1) * dk);
            let dot = |a: &[f64], b: &[f64]| (s..e).map(|c| a[c] * b[c]).sum::<f64>() * scale;
            for i in 0..queries.len() {
                let sent_scores: Vec<f64> = open.iter().map(|&j| dot(&q_s[i], &k_s[j])).collect();
                let a_s = simplex_projection_oracle(&sent_scores, 10_000);
                for (&j, &wj) in open.iter().zip(&a_s) {
                    let a_w = softmax(&k_w[j].iter().map(|k| dot(&q_w[i], k)).collect::<Vec<_>>());
                    for (t, &a) in a_w.iter().enumerate() {
                        for c in s..e {
                            concat[i][c] += wj * a * v_w[j][t][c];
                        }
                    }
                }
            }
        }
        let x = matmul(&concat, &self.w("ctx.attn.out"));
        let x = self.ln(&x, "ctx.ln1");
        let x = self.ff(&x, "ctx.ff");
        self.ln(&x, "ctx.ln2")
    }

    pub fn gate(&self, r: &Rows, d: &Rows) -> Rows {
        let z = add(&matmul(r, &self.w("ctx.gate.w_r")), &matmul(d, &self.w("ctx.gate.w_d")));
        z.iter()
            .zip(r.iter().zip(d))
            .map(|(zr, (rr, dr))| {
                zr.iter()
                    .zip(rr.iter().zip(dr))
                    .map(|(&zv, (&rv, &dv))| {
                        let g = 1.0 / (1.0 + (-zv).exp());
                        g * rv + (1.0 - g) * dv
                    })
                    .collect()
            })
            .collect()
    }
}
