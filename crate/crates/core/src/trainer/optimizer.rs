use crate::model::Params;
use crate::real::Real;

/// Adam with bias correction; moments mirror the parameter tensors.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub beta1: F,
    pub beta2: F,
    pub epsilon: F,
    pub step: u64,
    pub first_moment: Params<F>,
    pub second_moment: Params<F>,
}

impl<F: Real> Adam<F> {
    pub fn new(params: &Params<F>, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Adam {
            beta1: F::lit(beta1),
            beta2: F::lit(beta2),
            epsilon: F::lit(epsilon),
            step: 0,
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
        }
    }

    pub fn update(&mut self, params: &mut Params<F>, grads: &Params<F>, learning_rate: F) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let correction1 = F::one() - b1.powi(t);
        let correction2 = F::one() - b2.powi(t);
        let tensors = params
            .slices_mut()
            .into_iter()
            .zip(grads.slices())
            .zip(self.first_moment.slices_mut())
            .zip(self.second_moment.slices_mut());
        for (((p, g), m), v) in tensors {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (F::one() - b1) * g[i];
                v[i] = b2 * v[i] + (F::one() - b2) * g[i] * g[i];
                let m_hat = m[i] / correction1;
                let v_hat = v[i] / correction2;
                p[i] -= learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.first_moment.is_finite() && self.second_moment.is_finite()
    }
}
