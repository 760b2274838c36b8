#pragma once

namespace sb::model {

namespace detail {

template <typename P, typename F>
void visit_params(P& p, F&& f) {
  f("enc_w1", p.enc_w1);
  f("enc_b1", p.enc_b1);
  f("enc_w2", p.enc_w2);
  f("enc_b2", p.enc_b2);
  f("audio_proj_w", p.audio_proj_w);
  f("audio_proj_b", p.audio_proj_b);
  f("video_proj_w", p.video_proj_w);
  f("video_proj_b", p.video_proj_b);
  f("token_embedding", p.token_embedding);
  f("position_embedding", p.position_embedding);
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    auto& layer = p.layers[l];
    const std::string pre = "layer" + std::to_string(l + 1) + ".";
    f(pre + "ln1_gain", layer.ln1_gain);
    f(pre + "ln1_bias", layer.ln1_bias);
    for (std::size_t h = 0; h < kHeads; ++h) {
      const std::string hs = std::to_string(h);
      f(pre + "wq" + hs, layer.wq[h]);
      f(pre + "wk" + hs, layer.wk[h]);
      f(pre + "wv" + hs, layer.wv[h]);
      f(pre + "wo" + hs, layer.wo[h]);
    }
    f(pre + "ln2_gain", layer.ln2_gain);
    f(pre + "ln2_bias", layer.ln2_bias);
    f(pre + "ff_w1", layer.ff_w1);
    f(pre + "ff_b1", layer.ff_b1);
    f(pre + "ff_w2", layer.ff_w2);
    f(pre + "ff_b2", layer.ff_b2);
  }
  f("final_gain", p.final_gain);
  f("final_bias", p.final_bias);
  f("output_head", p.output_head);
}

}  // namespace detail

template <typename T>
template <typename F>
void ParamTensors<T>::visit(F&& f) {
  detail::visit_params(*this, std::forward<F>(f));
}

template <typename T>
template <typename F>
void ParamTensors<T>::visit(F&& f) const {
  detail::visit_params(*this, std::forward<F>(f));
}

}  // namespace sb::model
