//! Convert Wizard of Wikipedia and CMU_DoG shaped files to the corpus format.

use std::fs;

use kgdial::convert::{convert_cmu_dog, convert_wizard};
use kgdial::corpus::Split;
use serde_json::json;

fn main() -> anyhow::Result<()> {
    let dir = tempfile::tempdir()?;
    let wizard = json!([{
        "chosen_topic": "Lighthouse",
        "chosen_topic_passage": ["A lighthouse is a tower.", "It emits light to guide ships."],
        "dialog": [
            {"speaker": "1_Apprentice", "text": "Have you ever visited a lighthouse?"},
            {"speaker": "0_Wizard", "text": "Yes! They guide ships with light.",
             "checked_sentence": {"chosen_Lighthouse_1": "It emits light to guide ships."},
             "retrieved_passages": [{"Fresnel lens": ["Fresnel lenses focus the light."]}]}
        ]
    }]);
    let path = dir.path().join("wizard.json");
    fs::write(&path, wizard.to_string())?;
    for ex in convert_wizard(&path, Split::Train)?.examples {
        println!("{}", serde_json::to_string(&ex)?);
    }

    let docs = dir.path().join("docs");
    fs::create_dir(&docs)?;
    fs::write(
        docs.join("3.json"),
        json!({"0": {"movieName": "Up", "year": 2009}, "1": "An old man ties balloons to his house. It flies away."})
            .to_string(),
    )?;
    let conversation = json!({
        "wikiDocumentIdx": 3,
        "history": [
            {"docIdx": 0, "text": "Have you seen Up?", "uid": "user1"},
            {"docIdx": 1, "text": "Yes, the house flies with balloons.", "uid": "user2"}
        ]
    });
    let conv_path = dir.path().join("conversation.json");
    fs::write(&conv_path, conversation.to_string())?;
    for ex in convert_cmu_dog(&conv_path, &docs, Split::Test)?.examples {
        println!("{}", serde_json::to_string(&ex)?);
    }
    Ok(())
}
