use super::config::{ComponentFlags, ModelConfig};

/// Exact number of trainable scalars for the enabled components; the frozen
/// backbone and the scalar temperature are excluded.
///
/// LoRA adds rank-`r` factors to the query and value projections of every
/// layer in both encoders; each fusion layer adds a `D×r` and an `r×D` adapter.
pub fn count_trainable_params(config: &ModelConfig, flags: ComponentFlags) -> usize {
    let r = config.rank;
    let mut total = 0;
    if flags.lora {
        let per_layer = |d: usize| 2 * r * (d + d);
        total += config.layers_vision * per_layer(config.d_vision);
        total += config.layers_text * per_layer(config.d_text);
    }
    if flags.vision_adapters {
        total += config.fusion_layers_vision * 2 * config.d_vision * r;
    }
    if flags.text_adapters {
        total += config.fusion_layers_text * 2 * config.d_text * r;
    }
    total
}
