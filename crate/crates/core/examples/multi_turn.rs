//! Two editing turns: each output becomes the next turn's source.

mod support;

use nep_core::data::{read_grid, Color, Quadrant, SceneObject, SceneSpec, Shape};
use nep_core::edit::{multi_turn_edit, EditTurn};
use nep_core::model::SamplerConfig;
use nep_core::sequence::TextVocab;
use nep_core::tokenizer::{encode_image, EditMask, TokenizerConfig};

fn main() -> nep_core::Result<()> {
    let m = support::models()?;
    let (tok, vocab) = (TokenizerConfig::default(), TextVocab::default());
    let square = SceneObject::new(Shape::Square, Color::Red, Quadrant::TopLeft);
    let spec = SceneSpec { objects: vec![square], background: Color::Blue };
    let bar = SceneObject::new(Shape::Bar, Color::Yellow, Quadrant::BottomRight);

    let turns = vec![
        EditTurn { mask: Some(EditMask::from_positions(&square.positions(), &tok)?.pixel), instruction: "make the red square green".into() },
        EditTurn { mask: Some(EditMask::from_positions(&bar.positions(), &tok)?.pixel), instruction: "add a yellow bar bottom right".into() },
    ];
    let results = multi_turn_edit(&m.stage2, &tok, &vocab, &spec.render(&tok)?, &turns, &SamplerConfig::greedy(), 0)?;
    println!("start: {:?}", read_grid(&spec.grid()).objects());
    for (i, (turn, r)) in turns.iter().zip(&results).enumerate() {
        println!("turn {}: {:<32} {} steps -> {:?}", i + 1, turn.instruction, r.steps, read_grid(&encode_image(&r.image, &tok)?).objects());
        r.image.save(format!("multi_turn_{}.png", i + 1))?;
    }
    Ok(())
}
