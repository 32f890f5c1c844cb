"""Small hand-built datasets with hand-counted statistics."""

import numpy as np

from mmexplain.core import Sample, SegmentationMask, pad_answers

# (image_id, question, explanations)
FIVE = [
    ("img1", "What does the sign say?", ["the sign says stop", "it reads stop"]),
    ("img1", "What color is the car?", ["the car is red"]),
    ("img2", "What does the sign say?", ["the sign says go", "green sign says go", "it says go"]),
    ("img3", "what does the sign say", ["the sign says stop"]),
    ("img3", "Which brand?", ["the logo shows acme", "acme is printed"]),
]

# Counted by hand from FIVE:
#   explanations 2+1+3+1+2 = 9, one exact duplicate ("the sign says stop")
#   words 4+3 + 4 + 4+4+3 + 4 + 4+3 = 33
#   chars 18+13 + 14 + 16+18+10 + 18 + 19+15 = 141
#   distinct explanation words: the sign says stop it reads car is red go
#   green logo shows acme printed = 15
FIVE_STATS = {
    "n_images": 3,
    "n_questions": 5,
    "n_unique_questions": 3,
    "n_text_expl": 9,
    "n_unique_text_expl": 8,
    "n_vis_expl": 5,
    "avg_expl_per_q": 9 / 5,
    "avg_words_per_expl": 33 / 9,
    "avg_chars_per_expl": 141 / 9,
    "vocab_size": 15,
}


def five_samples():
    out = []
    for k, (img, q, expl) in enumerate(FIVE):
        mask = np.zeros((4, 4))
        mask[1:3, 1:3] = 1
        out.append(
            Sample(
                image_id=img,
                image=np.full((4, 4, 3), 0.5),
                question=q,
                answers=pad_answers(["stop"]),
                ocr=(),
                objects=(),
                text_explanations=tuple(expl),
                visual_explanation=SegmentationMask(mask, provenance="ground_truth"),
                question_id=f"q{k}",
            )
        )
    return out
