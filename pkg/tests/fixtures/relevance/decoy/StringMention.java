class StringMention {
    String doc = "import javax.crypto.Cipher;";
}
