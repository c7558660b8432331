use crate::conv::Padding;
use crate::error::{shape_err, Result};
use crate::{Real, Tape, Var};

/// Gate convolution of a convolutional LSTM.
///
/// `kernel` is `[k,k,Cin+Ch,4*Ch]` and `bias` is `[4*Ch]`; the four gate
/// blocks along the output channels are input, forget, output, candidate.
#[derive(Clone, Copy, Debug)]
pub struct ConvLstmParams {
    pub kernel: Var,
    pub bias: Var,
}

/// One step of a convolutional LSTM; returns `(hidden', cell')`.
pub fn conv_lstm_cell<T: Real>(
    tape: &mut Tape<T>,
    input: Var,
    hidden: Var,
    cell: Var,
    params: ConvLstmParams,
) -> Result<(Var, Var)> {
    let (xs, hs, cs) = (tape.shape(input), tape.shape(hidden), tape.shape(cell));
    if xs.len() != 4 || hs.len() != 4 || xs[..3] != hs[..3] || hs != cs {
        return shape_err(
            "conv_lstm_cell",
            format!("input {xs:?}, hidden {hs:?} and cell {cs:?} must share [B,H,W]"),
        );
    }
    let ch = hs[3];
    let joint = tape.concat_channels(&[input, hidden])?;
    let pre = tape.conv2d(joint, params.kernel, 1, Padding::SameZero)?;
    let pre = tape.add_bias(pre, params.bias)?;
    if tape.shape(pre)[3] != 4 * ch {
        return shape_err(
            "conv_lstm_cell",
            format!("gate kernel yields {} channels, need {}", tape.shape(pre)[3], 4 * ch),
        );
    }
    let i = tape.slice(pre, 3, 0, ch)?;
    let f = tape.slice(pre, 3, ch, ch)?;
    let o = tape.slice(pre, 3, 2 * ch, ch)?;
    let g = tape.slice(pre, 3, 3 * ch, ch)?;
    let (i, f, o, g) = (tape.sigmoid(i), tape.sigmoid(f), tape.sigmoid(o), tape.tanh(g));
    let kept = tape.mul(f, cell)?;
    let written = tape.mul(i, g)?;
    let cell_next = tape.add(kept, written)?;
    let squashed = tape.tanh(cell_next);
    let hidden_next = tape.mul(o, squashed)?;
    Ok((hidden_next, cell_next))
}
