"""
Reading learned prompts back as words
=====================================

Each learned context vector is mapped to its nearest vocabulary embeddings.
Before training the template prompt reads back as "a photo of a" at distance
zero; after training the vectors drift, and the reparameterized vectors (the
ones the text encoder actually sees) can drift further.
"""

import warnings

from prelab.interpret import nearest_words
from prelab.prompt_encoder import EncoderConfig, init_prompts, reparameterize
from prelab.synthetic import SyntheticTaskSpec, generate_synthetic_task
from prelab.train import TrainConfig, train_prompts

warnings.simplefilter("ignore")

synth = generate_synthetic_task(SyntheticTaskSpec(C=10, d=32, K=16))
vocab = synth.backbone.vocab

for line in nearest_words(init_prompts("template", 4, vocab).vectors, vocab, n=2, label="untrained V").lines():
    print(line)

prompt, encoder, _ = train_prompts(synth.task, TrainConfig(encoder=EncoderConfig(architecture="bilstm")),
                                   synth.backbone)
for label, vectors in (("trained V", prompt.vectors), ("trained V~", reparameterize(encoder, prompt.vectors))):
    for metric in ("euclidean", "cosine"):
        for line in nearest_words(vectors, vocab, n=3, metric=metric, label=label).lines():
            print(line)

# %%
# The hidden oracle prompt was drawn at random, so its nearest words carry no meaning.
for line in nearest_words(synth.oracle_prompt, vocab, n=2, label="oracle p*").lines():
    print(line)
