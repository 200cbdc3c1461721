//! Dense log-space factors over small variable sets.

/// Table of log-values over `vars` (ascending), row-major with the last
/// variable varying fastest.
#[derive(Debug, Clone)]
pub(crate) struct LogFactor {
    pub vars: Vec<usize>,
    pub cards: Vec<usize>,
    pub values: Vec<f64>,
}

pub(crate) fn log_sum_exp(xs: impl IntoIterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.into_iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn strides(cards: &[usize]) -> Vec<usize> {
    let mut s = vec![1; cards.len()];
    for i in (0..cards.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * cards[i + 1];
    }
    s
}

impl LogFactor {
    pub fn zeros(vars: Vec<usize>, cards: Vec<usize>) -> Self {
        let n = cards.iter().product();
        LogFactor {
            vars,
            cards,
            values: vec![0.0; n],
        }
    }

    pub fn contains(&self, var: usize) -> bool {
        self.vars.binary_search(&var).is_ok()
    }

    /// Index into `values` for a full assignment indexed by variable id.
    pub fn index_of(&self, assignment: &[u32]) -> usize {
        self.vars
            .iter()
            .zip(&self.cards)
            .fold(0, |acc, (&v, &c)| acc * c + assignment[v] as usize)
    }

    /// Sum of the given factors on the union of their scopes.
    pub fn product(factors: &[&LogFactor], all_cards: &[usize]) -> LogFactor {
        let mut vars: Vec<usize> = factors.iter().flat_map(|f| f.vars.iter().copied()).collect();
        vars.sort_unstable();
        vars.dedup();
        let cards: Vec<usize> = vars.iter().map(|&v| all_cards[v]).collect();
        let mut out = LogFactor::zeros(vars.clone(), cards.clone());

        // for each input factor, the stride its index moves by per output variable
        let maps: Vec<Vec<usize>> = factors
            .iter()
            .map(|f| {
                let fs = strides(&f.cards);
                vars.iter()
                    .map(|v| f.vars.binary_search(v).map_or(0, |p| fs[p]))
                    .collect()
            })
            .collect();
        let mut counter = vec![0usize; vars.len()];
        let mut idx = vec![0usize; factors.len()];
        for slot in out.values.iter_mut() {
            *slot = factors.iter().zip(&idx).map(|(f, &i)| f.values[i]).sum();
            // odometer increment, last variable fastest
            for d in (0..vars.len()).rev() {
                counter[d] += 1;
                for (k, m) in maps.iter().enumerate() {
                    idx[k] += m[d];
                }
                if counter[d] < cards[d] {
                    break;
                }
                for (k, m) in maps.iter().enumerate() {
                    idx[k] -= m[d] * cards[d];
                }
                counter[d] = 0;
            }
        }
        out
    }

    /// Log-sum-exp over one variable.
    pub fn sum_out(&self, var: usize) -> LogFactor {
        let pos = self.vars.binary_search(&var).expect("variable in factor");
        let card = self.cards[pos];
        let inner: usize = self.cards[pos + 1..].iter().product();
        let outer: usize = self.cards[..pos].iter().product();
        let mut vars = self.vars.clone();
        vars.remove(pos);
        let mut cards = self.cards.clone();
        cards.remove(pos);
        let mut values = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * card * inner + i;
                let m = (0..card).map(|k| self.values[base + k * inner]).fold(f64::NEG_INFINITY, f64::max);
                let v = if m == f64::NEG_INFINITY {
                    m
                } else {
                    m + (0..card).map(|k| (self.values[base + k * inner] - m).exp()).sum::<f64>().ln()
                };
                values.push(v);
            }
        }
        LogFactor { vars, cards, values }
    }

    /// Log-values for each value of `var` with all other variables fixed by
    /// `assignment`.
    pub fn slice(&self, var: usize, assignment: &mut [u32], out: &mut Vec<f64>) {
        out.clear();
        let saved = assignment[var];
        let pos = self.vars.binary_search(&var).expect("variable in factor");
        for k in 0..self.cards[pos] {
            assignment[var] = k as u32;
            out.push(self.values[self.index_of(assignment)]);
        }
        assignment[var] = saved;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_and_sum_out_match_brute_force() {
        let cards = [2usize, 3, 2];
        let a = LogFactor {
            vars: vec![0, 1],
            cards: vec![2, 3],
            values: vec![0.1, -0.3, 0.7, 1.1, 0.0, -2.0],
        };
        let b = LogFactor {
            vars: vec![1, 2],
            cards: vec![3, 2],
            values: vec![0.5, 0.2, -1.0, 0.3, 0.9, -0.4],
        };
        let p = LogFactor::product(&[&a, &b], &cards);
        assert_eq!(p.vars, vec![0, 1, 2]);
        for x0 in 0..2u32 {
            for x1 in 0..3u32 {
                for x2 in 0..2u32 {
                    let asg = [x0, x1, x2];
                    let expect = a.values[a.index_of(&asg)] + b.values[b.index_of(&asg)];
                    assert!((p.values[p.index_of(&asg)] - expect).abs() < 1e-15);
                }
            }
        }
        let s = p.sum_out(1);
        for x0 in 0..2u32 {
            for x2 in 0..2u32 {
                let expect = log_sum_exp((0..3u32).map(|x1| p.values[p.index_of(&[x0, x1, x2])]));
                assert!((s.values[s.index_of(&[x0, 0, x2])] - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn log_sum_exp_is_stable() {
        assert!((log_sum_exp([1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(log_sum_exp([f64::NEG_INFINITY, f64::NEG_INFINITY]), f64::NEG_INFINITY);
    }
}
