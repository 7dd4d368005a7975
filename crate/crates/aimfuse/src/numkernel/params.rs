use super::Mat;

/// A named collection of learnable matrices.
///
/// Visit order must be deterministic and names unique within one block;
/// composite blocks prefix their children's names (`"bio.w_g"`). The
/// optimizer and the checkpoint format both key on these names, so they are
/// part of the serialization contract.
pub trait ParamBlock {
    fn visit(&self, f: &mut dyn FnMut(&str, &Mat));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Mat));

    /// Non-learnable persistent state (normalization running statistics):
    /// serialized with the model, never touched by the optimizer.
    fn visit_state(&self, _f: &mut dyn FnMut(&str, &Mat)) {}
    fn visit_state_mut(&mut self, _f: &mut dyn FnMut(&str, &mut Mat)) {}
}
