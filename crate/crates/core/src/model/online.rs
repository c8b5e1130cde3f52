//! Single-user inference: full-history scoring and the incremental
//! two-level update used when serving.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use super::{session_aggregate, HighState, LowNet, Model, ModelBuffers, UserRun};
use crate::error::{Error, Result};
use crate::nn::mlp::mlp_forward;
use crate::nn::Segments;
use crate::parallel::Exec;
use crate::real::Real;

impl<T: Real> Model<T> {
    /// Predictions for every interaction of one user, starting from ŝ.
    pub fn forward_user(&self, sessions: &[Array2<T>], buffers: Option<&ModelBuffers<T>>) -> Result<Vec<Array2<T>>> {
        let run = UserRun { sessions: sessions.to_vec(), init: None };
        let mut fwd = self.forward_batch(std::slice::from_ref(&run), buffers, None, Exec::Sequential)?;
        Ok(fwd.outputs.remove(0).predictions)
    }

    fn require_hierarchical(&self) -> Result<()> {
        if self.high.is_none() {
            return Err(Error::config(format!(
                "{} has no session-level state; incremental inference needs a hierarchical model",
                self.config.architecture.name()
            )));
        }
        Ok(())
    }

    /// Prediction for the next interaction of the current session, given the
    /// items seen so far in it (`prefix`, possibly empty) and the state from
    /// earlier sessions.
    pub fn low_forward(&self, prefix: ArrayView2<T>, state: &HighState<T>, buffers: Option<&ModelBuffers<T>>) -> Result<Array1<T>> {
        self.require_hierarchical()?;
        let d = self.embedding_dim();
        if prefix.ncols() != d {
            return Err(Error::Shape(format!("prefix items have {} features, expected {d}", prefix.ncols())));
        }
        // the last row of `items` is never read: token t only sees items before t
        let mut items = Array2::zeros((prefix.nrows() + 1, d));
        items.slice_mut(s![..prefix.nrows(), ..]).assign(&prefix);
        let tok = self.session_tokens(items.view(), state.top().view());
        let at = prefix.nrows();
        let c = match &self.low {
            LowNet::Tcn(tcn) => {
                let segs = Segments::single(tok.nrows());
                let (c, _, _) = tcn.forward(tok.view(), &segs, buffers.map(|b| b.tcn.as_slice()), None)?;
                c
            }
            LowNet::Gru(stack) => {
                let init = self.low_init(stack, Some(&state.layers));
                stack.forward(tok.view(), &init, None)?.0
            }
        };
        let (u, _) = mlp_forward(c.slice(s![at..at + 1, ..]), &self.head)?;
        Ok(u.row(0).to_owned())
    }

    /// Folds a finished session into the high-level state.
    pub fn high_update(&self, state: &HighState<T>, session: ArrayView2<T>) -> Result<HighState<T>> {
        self.require_hierarchical()?;
        let high = self.high.as_ref().expect("hierarchical");
        if session.nrows() == 0 {
            return Err(Error::EmptySequence);
        }
        let agg = if self.last_hidden() {
            let LowNet::Gru(low) = &self.low else {
                return Err(Error::config("last-hidden aggregation needs a recurrent low-level model"));
            };
            let tok = self.session_tokens(session, state.top().view());
            let init = self.low_init(low, Some(&state.layers));
            let (top, _, _) = low.forward(tok.view(), &init, None)?;
            top.slice(s![session.nrows()..session.nrows() + 1, ..]).to_owned()
        } else {
            session_aggregate(session, None)?.insert_axis(Axis(0))
        };
        let (_, finals, _) = high.forward(agg.view(), &state.layers, None)?;
        Ok(HighState { layers: finals, sessions: state.sessions + 1 })
    }
}
